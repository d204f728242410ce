#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "fmfa/fmfa.hpp"

using namespace fmfa;
using namespace fmfa::io;

namespace {

EmbeddingFile random_file(std::size_t count, std::size_t dim, bool locals, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  EmbeddingFile f{random_matrix(count, dim, rng), std::nullopt};
  if (locals) {
    f.locals.emplace();
    for (std::size_t i = 0; i < count; ++i)
      f.locals->push_back(i % 2 == 0 ? LocalBlock{random_matrix(1 + i % 4, dim, rng), Matrix(0, dim)}
                                     : LocalBlock{Matrix(0, dim), random_matrix(3, dim, rng)});
  }
  return f;
}

class TempDir {
 public:
  TempDir() : path_(std::filesystem::temp_directory_path() / ("fmfa_io_" + std::to_string(::getpid()))) {
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

template <typename E>
std::string error_of(const std::vector<char>& bytes) {
  try {
    decode_embeddings(bytes);
  } catch (const E& e) {
    return e.what();
  } catch (const std::exception& e) {
    return std::string("wrong error type: ") + e.what();
  }
  return "no error";
}

Manifest pair_manifest(std::size_t pairs) {
  Manifest m;
  for (std::size_t s = 0; s < pairs; ++s) {
    const auto id = static_cast<IdentityId>(s / 2);
    m.push_back({"s" + std::to_string(s), id, Modality::text, static_cast<std::uint32_t>(2 * s)});
    m.push_back({"s" + std::to_string(s), id, Modality::image, static_cast<std::uint32_t>(2 * s + 1)});
  }
  return m;
}

}  // namespace

TEST(EmbeddingFile, EncodeDecodeIsBitExact) {
  for (bool locals : {false, true})
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const EmbeddingFile f = random_file(1 + seed, 1 + seed % 5, locals, seed);
      const auto bytes = encode_embeddings(f);
      EXPECT_EQ(decode_embeddings(bytes), f);
      EXPECT_EQ(encode_embeddings(decode_embeddings(bytes)), bytes);
    }
}

TEST(EmbeddingFile, HeaderLayout) {
  const auto bytes = encode_embeddings({Matrix{{1.0, -2.0}}, std::nullopt});
  ASSERT_EQ(bytes.size(), kHeaderBytes + 16);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "FMEB");
  const std::vector<unsigned char> header(bytes.begin() + 4, bytes.begin() + 20);
  EXPECT_EQ(header, (std::vector<unsigned char>{1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0, 0}));
  // 1.0 as little-endian IEEE double
  EXPECT_EQ(static_cast<unsigned char>(bytes[27]), 0x3f);
  EXPECT_EQ(static_cast<unsigned char>(bytes[26]), 0xf0);
}

TEST(EmbeddingFile, SaveLoadRoundTrip) {
  TempDir dir;
  const EmbeddingFile f = random_file(6, 4, true, 3);
  save_embeddings(dir.path() / "x.fmeb", f);
  EXPECT_EQ(load_embeddings(dir.path() / "x.fmeb"), f);
}

TEST(EmbeddingFile, BadMagicNamesTheBytes) {
  auto bytes = encode_embeddings(random_file(2, 2, false, 1));
  bytes[0] = 'X';
  bytes[3] = '\x01';
  const std::string msg = error_of<BadMagicError>(bytes);
  EXPECT_NE(msg.find("XME"), std::string::npos) << msg;
  EXPECT_NE(msg.find("FMEB"), std::string::npos) << msg;
}

TEST(EmbeddingFile, VersionMismatch) {
  auto bytes = encode_embeddings(random_file(2, 2, false, 1));
  bytes[4] = 2;
  EXPECT_NE(error_of<VersionMismatchError>(bytes).find("version 2"), std::string::npos);
}

TEST(EmbeddingFile, TruncationIsDetectedAtEveryLength) {
  const auto bytes = encode_embeddings(random_file(3, 2, true, 2));
  for (std::size_t n = 0; n < bytes.size(); ++n) {
    const std::vector<char> cut(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(n));
    if (n < 4) {
      EXPECT_THROW(decode_embeddings(cut), FormatError) << n;
    } else {
      EXPECT_THROW(decode_embeddings(cut), TruncatedError) << n;
    }
  }
}

TEST(EmbeddingFile, HugeDeclaredCountIsTruncationNotAllocation) {
  auto bytes = encode_embeddings(random_file(1, 1, false, 0));
  bytes[8] = bytes[9] = bytes[10] = bytes[11] = '\xff';
  bytes[12] = bytes[13] = bytes[14] = bytes[15] = '\xff';
  EXPECT_THROW(decode_embeddings(bytes), TruncatedError);
}

TEST(EmbeddingFile, TrailingBytesAreCountMismatch) {
  auto bytes = encode_embeddings(random_file(2, 2, false, 1));
  bytes.insert(bytes.end(), 8, '\0');
  EXPECT_NE(error_of<CountMismatchError>(bytes).find("8"), std::string::npos);
}

TEST(EmbeddingFile, UnknownFlagsAreRejected) {
  auto bytes = encode_embeddings(random_file(2, 2, false, 1));
  bytes[16] = 4;
  EXPECT_THROW(decode_embeddings(bytes), FormatError);
}

TEST(EmbeddingFile, EncodeRejectsInconsistentLocals) {
  EmbeddingFile f = random_file(2, 3, true, 1);
  f.locals->pop_back();
  EXPECT_THROW(encode_embeddings(f), Error);
}

TEST(EmbeddingFile, MissingFileIsAnError) {
  EXPECT_THROW(load_embeddings("/nonexistent/dir/x.fmeb"), Error);
}

TEST(Manifest, WriteParseRoundTrip) {
  const Manifest m = pair_manifest(3);
  EXPECT_EQ(parse_manifest(write_manifest(m)), m);
  const std::string first = write_manifest(m).substr(0, write_manifest(m).find('\n'));
  EXPECT_EQ(first, R"({"sample_id":"s0","identity":0,"modality":"text","embedding_index":0})");
}

TEST(Manifest, SkipsBlankLines) {
  EXPECT_EQ(parse_manifest("\n" + write_manifest(pair_manifest(1)) + "\n  \n").size(), 2u);
}

TEST(Manifest, ErrorsNameTheLine) {
  const std::string good = write_manifest(pair_manifest(1));
  for (const std::string bad : {
           R"({"sample_id":"a","identity":-1,"modality":"text","embedding_index":0})",
           R"({"sample_id":"a","identity":0,"modality":"audio","embedding_index":0})",
           R"({"sample_id":"a","identity":0,"modality":"text"})",
           R"({"sample_id":"a","identity":0,"modality":"text","embedding_index":-3})",
           R"(not json)",
       }) {
    try {
      parse_manifest(good + bad + "\n");
      FAIL() << "expected an error for " << bad;
    } catch (const FormatError& e) {
      EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
    }
  }
}

TEST(Manifest, SaveLoadRoundTrip) {
  TempDir dir;
  save_manifest(dir.path() / "m.jsonl", pair_manifest(4));
  EXPECT_EQ(load_manifest(dir.path() / "m.jsonl"), pair_manifest(4));
}

TEST(AssembleDataset, JoinsPairsInManifestOrder) {
  const EmbeddingFile f = random_file(6, 3, true, 4);
  Manifest m = pair_manifest(3);
  std::swap(m[0], m[4]);
  const Dataset d = assemble_dataset(f, m);
  EXPECT_EQ(d.sample_ids, (std::vector<std::string>{"s2", "s0", "s1"}));
  EXPECT_EQ(d.set.identities, (std::vector<IdentityId>{1, 0, 0}));
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(d.set.text_globals(1, k), f.globals(0, k));
    EXPECT_EQ(d.set.image_globals(0, k), f.globals(5, k));
  }
  ASSERT_TRUE(d.locals.has_value());
  EXPECT_EQ(d.locals->samples[1].tokens, (*f.locals)[0].tokens);
  EXPECT_EQ(d.locals->samples[1].patches, (*f.locals)[1].patches);
}

TEST(AssembleDataset, WithoutLocals) {
  EXPECT_FALSE(assemble_dataset(random_file(4, 2, false, 1), pair_manifest(2)).locals.has_value());
}

TEST(AssembleDataset, RejectsBrokenManifests) {
  const EmbeddingFile f = random_file(4, 2, false, 1);
  Manifest out_of_range = pair_manifest(2);
  out_of_range[3].embedding_index = 4;
  EXPECT_THROW(assemble_dataset(f, out_of_range), FormatError);
  Manifest unpaired = pair_manifest(2);
  unpaired.pop_back();
  EXPECT_THROW(assemble_dataset(f, unpaired), FormatError);
  Manifest duplicate = pair_manifest(2);
  duplicate[1].modality = Modality::text;
  EXPECT_THROW(assemble_dataset(f, duplicate), FormatError);
  Manifest conflicting = pair_manifest(2);
  conflicting[1].identity = 9;
  EXPECT_THROW(assemble_dataset(f, conflicting), FormatError);
}

TEST(AssembleDataset, SynthesizedFilesLoadFromDisk) {
  TempDir dir;
  SynthConfig cfg;
  cfg.num_identities = 2;
  cfg.samples_per_id = 2;
  const auto ds = synthesize_dataset(cfg);
  write_synthetic(dir.path(), ds);
  const Dataset d = load_dataset(dir.path() / "test.fmeb", dir.path() / "test.jsonl");
  EXPECT_EQ(d.set.size(), 4u);
  EXPECT_EQ(load_embeddings(dir.path() / "train.fmeb"), ds.train.file);
}
