#pragma once

// Binary embedding files ("FMEB") and their JSON-lines manifests.
//
// Layout, all integers u32 and all reals f64, little-endian:
//   "FMEB" | version | count | dim | flags
//   count x dim global rows, row-major
//   if flags bit 0: for each row, L | L x dim token rows | N | N x dim patch rows
//
// The manifest maps rows to pairs: {sample_id, identity, modality, embedding_index}.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "fmfa/global_align.hpp"
#include "fmfa/local_align.hpp"
#include "fmfa/matrix.hpp"

namespace fmfa::io {

inline constexpr std::array<char, 4> kMagic{'F', 'M', 'E', 'B'};
inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::uint32_t kHasLocalFeatures = 1u;
inline constexpr std::size_t kHeaderBytes = 20;

class FormatError : public Error {
 public:
  using Error::Error;
};
class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};
class VersionMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};
class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};
class CountMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Token and patch rows attached to one global row. Text rows usually carry
/// only tokens and image rows only patches.
struct LocalBlock {
  Matrix tokens;
  Matrix patches;
  friend bool operator==(const LocalBlock&, const LocalBlock&) = default;
};

struct EmbeddingFile {
  Matrix globals;                                 // count x dim
  std::optional<std::vector<LocalBlock>> locals;  // one per global row

  std::size_t count() const noexcept { return globals.rows(); }
  std::size_t dim() const noexcept { return globals.cols(); }
  friend bool operator==(const EmbeddingFile&, const EmbeddingFile&) = default;
};

namespace detail {

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int b = 0; b < 4; ++b) bytes_.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
  }
  void f64(double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) bytes_.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
  }
  void rows(const Matrix& m) {
    for (double v : m.data()) f64(v);
  }
  void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  std::vector<char> take() { return std::move(bytes_); }

 private:
  std::vector<char> bytes_;
};

class Reader {
 public:
  explicit Reader(std::span<const char> bytes) : bytes_(bytes) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + b])) << (8 * b);
    pos_ += 4;
    return v;
  }

  Matrix rows(std::size_t count, std::size_t dim, const char* what) {
    if (dim != 0 && count > remaining() / (dim * 8)) need(remaining() + 1, what);
    need(count * dim * 8, what);
    std::vector<double> data(count * dim);
    for (double& v : data) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b)
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + b])) << (8 * b);
      v = std::bit_cast<double>(bits);
      pos_ += 8;
    }
    return Matrix(count, dim, std::move(data));
  }

  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (remaining() < n)
      throw TruncatedError(fmfa::detail::concat("embedding file truncated while reading ", what, " at offset ",
                                                kMagic.size() + pos_, ": ", remaining(), " bytes left"));
  }

  std::span<const char> bytes_;
  std::size_t pos_ = 0;
};

inline std::string printable(std::span<const char> bytes) {
  std::string out;
  for (char c : bytes) {
    const auto u = static_cast<unsigned char>(c);
    if (u >= 0x20 && u < 0x7f) {
      out += c;
    } else {
      out += fmfa::detail::concat("\\x", "0123456789abcdef"[u >> 4], "0123456789abcdef"[u & 0xf]);
    }
  }
  return out;
}

}  // namespace detail

inline std::vector<char> encode_embeddings(const EmbeddingFile& file) {
  if (file.locals && file.locals->size() != file.count())
    throw Error("encode_embeddings: local block count does not match global rows");
  detail::Writer w;
  w.raw(std::string_view(kMagic.data(), kMagic.size()));
  w.u32(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(file.count()));
  w.u32(static_cast<std::uint32_t>(file.dim()));
  w.u32(file.locals ? kHasLocalFeatures : 0u);
  w.rows(file.globals);
  if (file.locals) {
    for (const auto& block : *file.locals) {
      if ((block.tokens.rows() && block.tokens.cols() != file.dim()) ||
          (block.patches.rows() && block.patches.cols() != file.dim()))
        throw Error("encode_embeddings: local feature width does not match dim");
      w.u32(static_cast<std::uint32_t>(block.tokens.rows()));
      w.rows(block.tokens);
      w.u32(static_cast<std::uint32_t>(block.patches.rows()));
      w.rows(block.patches);
    }
  }
  return w.take();
}

inline EmbeddingFile decode_embeddings(std::span<const char> bytes) {
  if (bytes.size() < kMagic.size() || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
    const auto found = bytes.first(std::min(bytes.size(), kMagic.size()));
    throw BadMagicError("embedding file: bad magic '" + detail::printable(found) + "', expected 'FMEB'");
  }
  detail::Reader r(bytes.subspan(kMagic.size()));
  const std::uint32_t version = r.u32("version");
  if (version != kFormatVersion)
    throw VersionMismatchError(fmfa::detail::concat("embedding file: version ", version, ", expected ", kFormatVersion));
  const std::uint32_t count = r.u32("count");
  const std::uint32_t dim = r.u32("dim");
  const std::uint32_t flags = r.u32("flags");
  if (flags & ~kHasLocalFeatures) throw FormatError(fmfa::detail::concat("embedding file: unknown flags ", flags));

  EmbeddingFile file;
  file.globals = r.rows(count, dim, "global rows");
  if (flags & kHasLocalFeatures) {
    file.locals.emplace();
    for (std::uint32_t k = 0; k < count; ++k) {
      LocalBlock block;
      const std::uint32_t L = r.u32("token count");
      block.tokens = r.rows(L, dim, "token rows");
      const std::uint32_t N = r.u32("patch count");
      block.patches = r.rows(N, dim, "patch rows");
      file.locals->push_back(std::move(block));
    }
  }
  if (r.remaining() != 0)
    throw CountMismatchError(fmfa::detail::concat("embedding file: ", r.remaining(),
                                                  " bytes beyond the declared content (count ", count, ", dim ", dim,
                                                  ")"));
  return file;
}

inline void save_embeddings(const std::filesystem::path& path, const EmbeddingFile& file) {
  const auto bytes = encode_embeddings(file);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

inline EmbeddingFile load_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  const std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_embeddings(bytes);
}

enum class Modality { text, image };

struct ManifestRecord {
  std::string sample_id;
  IdentityId identity = 0;
  Modality modality = Modality::text;
  std::uint32_t embedding_index = 0;
  friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

using Manifest = std::vector<ManifestRecord>;

inline std::string write_manifest(const Manifest& manifest) {
  std::string out;
  for (const auto& rec : manifest) {
    nlohmann::ordered_json j;
    j["sample_id"] = rec.sample_id;
    j["identity"] = rec.identity;
    j["modality"] = rec.modality == Modality::text ? "text" : "image";
    j["embedding_index"] = rec.embedding_index;
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline Manifest parse_manifest(std::string_view text) {
  Manifest manifest;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ManifestRecord rec;
      rec.sample_id = j.at("sample_id").get<std::string>();
      const auto identity = j.at("identity").get<std::int64_t>();
      if (identity < 0) throw Error("identity must be non-negative");
      rec.identity = static_cast<IdentityId>(identity);
      const auto modality = j.at("modality").get<std::string>();
      if (modality == "text") {
        rec.modality = Modality::text;
      } else if (modality == "image") {
        rec.modality = Modality::image;
      } else {
        throw Error("modality must be 'text' or 'image', got '" + modality + "'");
      }
      const auto index = j.at("embedding_index").get<std::int64_t>();
      if (index < 0) throw Error("embedding_index must be non-negative");
      rec.embedding_index = static_cast<std::uint32_t>(index);
      manifest.push_back(std::move(rec));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(fmfa::detail::concat("manifest line ", line_no, ": ", e.what()));
    } catch (const Error& e) {
      throw FormatError(fmfa::detail::concat("manifest line ", line_no, ": ", e.what()));
    }
  }
  return manifest;
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_manifest(text);
}

inline void save_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << write_manifest(manifest);
}

/// Pairs joined from an embedding file through its manifest, in order of
/// first appearance of each sample id.
struct Dataset {
  std::vector<std::string> sample_ids;
  EmbeddingSet set;
  std::optional<LocalFeatureBatch> locals;
};

inline Dataset assemble_dataset(const EmbeddingFile& file, const Manifest& manifest) {
  struct Pair {
    std::optional<ManifestRecord> text;
    std::optional<ManifestRecord> image;
  };
  std::vector<std::string> order;
  std::map<std::string, Pair> pairs;
  for (const auto& rec : manifest) {
    if (rec.embedding_index >= file.count())
      throw FormatError(fmfa::detail::concat("manifest: sample '", rec.sample_id, "' points at row ",
                                             rec.embedding_index, " of ", file.count()));
    auto [it, inserted] = pairs.try_emplace(rec.sample_id);
    if (inserted) order.push_back(rec.sample_id);
    auto& slot = rec.modality == Modality::text ? it->second.text : it->second.image;
    if (slot) throw FormatError("manifest: duplicate " + std::string(rec.modality == Modality::text ? "text" : "image") +
                                " record for sample '" + rec.sample_id + "'");
    slot = rec;
  }

  const std::size_t n = order.size();
  const std::size_t d = file.dim();
  Dataset ds;
  ds.sample_ids = order;
  ds.set.text_globals = Matrix(n, d);
  ds.set.image_globals = Matrix(n, d);
  if (file.locals) ds.locals.emplace();
  for (std::size_t i = 0; i < n; ++i) {
    const Pair& p = pairs.at(order[i]);
    if (!p.text || !p.image) throw FormatError("manifest: sample '" + order[i] + "' lacks a text or image record");
    if (p.text->identity != p.image->identity)
      throw FormatError("manifest: sample '" + order[i] + "' has conflicting identities");
    const auto t = file.globals.row(p.text->embedding_index);
    const auto v = file.globals.row(p.image->embedding_index);
    std::copy(t.begin(), t.end(), ds.set.text_globals.row(i).begin());
    std::copy(v.begin(), v.end(), ds.set.image_globals.row(i).begin());
    ds.set.identities.push_back(p.text->identity);
    if (file.locals) {
      ds.locals->samples.push_back({(*file.locals)[p.text->embedding_index].tokens,
                                    (*file.locals)[p.image->embedding_index].patches, p.text->identity});
    }
  }
  return ds;
}

inline Dataset load_dataset(const std::filesystem::path& embeddings, const std::filesystem::path& manifest) {
  return assemble_dataset(load_embeddings(embeddings), load_manifest(manifest));
}

}  // namespace fmfa::io
