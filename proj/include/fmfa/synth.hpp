#pragma once

// Identity-clustered synthetic data. Each identity owns a global prototype
// and N patch prototypes; its token prototypes are a per-identity
// permutation of the patch prototypes, so tokens and patches of one identity
// are alignable. Samples are prototypes plus isotropic Gaussian noise.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "fmfa/io.hpp"
#include "fmfa/matrix.hpp"

namespace fmfa {

struct SynthConfig {
  std::size_t num_identities = 8;
  std::size_t samples_per_id = 4;  // pairs per identity in each split
  std::size_t dim = 16;
  std::size_t tokens = 6;
  std::size_t patches = 8;
  double noise_sigma = 0.05;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_identities < 1 || samples_per_id < 1 || dim < 1 || tokens < 1 || patches < 1)
      throw Error("SynthConfig: all counts must be at least 1");
    if (tokens > kDefaultMaxTokens) throw Error(detail::concat("SynthConfig: at most ", kDefaultMaxTokens, " tokens"));
    if (!(noise_sigma >= 0.0)) throw Error("SynthConfig: noise_sigma must be non-negative");
  }
};

/// One split as written to disk: rows 2s and 2s+1 hold the text and image
/// side of sample s.
struct SyntheticSplit {
  io::EmbeddingFile file;
  io::Manifest manifest;
};

struct SyntheticDataset {
  SyntheticSplit train;
  SyntheticSplit test;
};

inline SyntheticDataset synthesize_dataset(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  const std::size_t d = cfg.dim;

  struct Prototype {
    std::vector<double> global;
    Matrix patches;
    std::vector<std::size_t> token_source;
  };
  std::vector<Prototype> protos(cfg.num_identities);
  for (auto& p : protos) {
    p.global.resize(d);
    for (double& v : p.global) v = unit(rng);
    p.patches = Matrix(cfg.patches, d);
    for (double& v : p.patches.data()) v = unit(rng);
    std::vector<std::size_t> perm(cfg.patches);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    p.token_source.resize(cfg.tokens);
    for (std::size_t l = 0; l < cfg.tokens; ++l) p.token_source[l] = perm[l % cfg.patches];
  }

  auto noisy = [&](double v) { return cfg.noise_sigma > 0.0 ? v + cfg.noise_sigma * unit(rng) : v; };

  auto make_split = [&](const std::string& prefix) {
    SyntheticSplit split;
    const std::size_t pairs = cfg.num_identities * cfg.samples_per_id;
    split.file.globals = Matrix(2 * pairs, d);
    split.file.locals.emplace();
    std::size_t s = 0;
    for (std::size_t id = 0; id < cfg.num_identities; ++id) {
      const Prototype& p = protos[id];
      for (std::size_t rep = 0; rep < cfg.samples_per_id; ++rep, ++s) {
        const std::size_t text_row = 2 * s;
        const std::size_t image_row = 2 * s + 1;
        for (std::size_t k = 0; k < d; ++k) split.file.globals(text_row, k) = noisy(p.global[k]);
        for (std::size_t k = 0; k < d; ++k) split.file.globals(image_row, k) = noisy(p.global[k]);
        io::LocalBlock text{Matrix(cfg.tokens, d), Matrix(0, d)};
        for (std::size_t l = 0; l < cfg.tokens; ++l)
          for (std::size_t k = 0; k < d; ++k) text.tokens(l, k) = noisy(p.patches(p.token_source[l], k));
        io::LocalBlock image{Matrix(0, d), Matrix(cfg.patches, d)};
        for (std::size_t j = 0; j < cfg.patches; ++j)
          for (std::size_t k = 0; k < d; ++k) image.patches(j, k) = noisy(p.patches(j, k));
        split.file.locals->push_back(std::move(text));
        split.file.locals->push_back(std::move(image));

        const std::string sample_id = prefix + "/" + std::to_string(s);
        const auto identity = static_cast<IdentityId>(id);
        split.manifest.push_back({sample_id, identity, io::Modality::text, static_cast<std::uint32_t>(text_row)});
        split.manifest.push_back({sample_id, identity, io::Modality::image, static_cast<std::uint32_t>(image_row)});
      }
    }
    return split;
  };

  SyntheticDataset ds;
  ds.train = make_split("train");
  ds.test = make_split("test");
  return ds;
}

/// Writes train.fmeb, train.jsonl, test.fmeb and test.jsonl into `dir`.
inline void write_synthetic(const std::filesystem::path& dir, const SyntheticDataset& ds) {
  std::filesystem::create_directories(dir);
  io::save_embeddings(dir / "train.fmeb", ds.train.file);
  io::save_manifest(dir / "train.jsonl", ds.train.manifest);
  io::save_embeddings(dir / "test.fmeb", ds.test.file);
  io::save_manifest(dir / "test.jsonl", ds.test.manifest);
}

}  // namespace fmfa
