#include "test_support.hpp"

#include <limits>
#include <map>
#include <numeric>
#include <set>

namespace iclea {
namespace {

using test::ScratchDir;

EmbeddingTable table(EmbeddingKind kind, std::size_t count, std::size_t dim, std::vector<float> data) { return {kind, count, dim, std::move(data)}; }

TEST(ReadEmbeddings, ReadsRowsAsWritten) {
  ScratchDir dir("emb");
  const auto t = table(EmbeddingKind::entity_name, 2, 3, {1, 0, 0, 0, 1, 0});
  write_embeddings(dir.file("a.emb"), t);
  EXPECT_EQ(read_embeddings(dir.file("a.emb")), t);
}

TEST(ReadEmbeddings, HeaderLayoutIsLittleEndian) {
  const auto bytes = encode_embeddings(table(EmbeddingKind::relation_name, 2, 3, {1, 0, 0, 0, 1, 0}));
  ASSERT_EQ(bytes.size(), 16u + 2 * 3 * 4);
  const unsigned char expect[16] = {'I', 'C', 'L', 'E', 1, 2, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0};
  for (int i = 0; i < 16; ++i) EXPECT_EQ(static_cast<unsigned char>(bytes[i]), expect[i]) << "byte " << i;
  // 1.0f is 0x3f800000.
  EXPECT_EQ(static_cast<unsigned char>(bytes[16 + 3]), 0x3f);
  EXPECT_EQ(static_cast<unsigned char>(bytes[16 + 2]), 0x80);
}

TEST(ReadEmbeddings, ShortPayloadIsTruncationError) {
  auto bytes = encode_embeddings(table(EmbeddingKind::entity_name, 2, 3, {1, 0, 0, 0, 1, 0}));
  bytes.resize(bytes.size() - 4);
  EXPECT_THROW(decode_embeddings(bytes), TruncationError);
  // Header says 768 dims, payload holds far fewer.
  auto big = encode_embeddings(table(EmbeddingKind::fused, 1, 4, {1, 2, 3, 4}));
  big[12] = 0x00;
  big[13] = 0x03;  // dim = 768
  EXPECT_THROW(decode_embeddings(big), TruncationError);
  EXPECT_THROW(decode_embeddings("ICLE"), TruncationError);
}

TEST(ReadEmbeddings, BadMagicOrVersionIsFormatError) {
  auto bytes = encode_embeddings(table(EmbeddingKind::entity_name, 1, 1, {1}));
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_embeddings(bad_magic), FormatError);
  auto bad_version = bytes;
  bad_version[4] = 2;
  EXPECT_THROW(decode_embeddings(bad_version), FormatError);
  auto bad_kind = bytes;
  bad_kind[5] = 9;
  EXPECT_THROW(decode_embeddings(bad_kind), FormatError);
  auto bad_reserved = bytes;
  bad_reserved[6] = 1;
  EXPECT_THROW(decode_embeddings(bad_reserved), FormatError);
}

TEST(ReadEmbeddings, NanIsDataError) {
  auto t = table(EmbeddingKind::fused, 1, 2, {1, std::numeric_limits<float>::quiet_NaN()});
  EXPECT_THROW(decode_embeddings(encode_embeddings(t)), DataError);
  t.data[1] = std::numeric_limits<float>::infinity();
  EXPECT_THROW(decode_embeddings(encode_embeddings(t)), DataError);
}

TEST(ReadEmbeddings, NormContractPerKind) {
  const auto off = table(EmbeddingKind::entity_name, 1, 2, {1.0f, 0.1f});
  EXPECT_THROW(decode_embeddings(encode_embeddings(off)), DataError);
  const auto within = table(EmbeddingKind::entity_name, 1, 2, {1.0005f, 0.0f});
  EXPECT_NO_THROW(decode_embeddings(encode_embeddings(within)));
  const auto fused = table(EmbeddingKind::fused, 1, 2, {1.0f, 1.0f});
  EXPECT_NO_THROW(decode_embeddings(encode_embeddings(fused)));
  const auto empty_desc = table(EmbeddingKind::entity_description, 1, 2, {0.0f, 0.0f});
  EXPECT_NO_THROW(decode_embeddings(encode_embeddings(empty_desc)));
  const auto zero_name = table(EmbeddingKind::entity_name, 1, 2, {0.0f, 0.0f});
  EXPECT_THROW(decode_embeddings(encode_embeddings(zero_name)), DataError);
}

TEST(ReadEmbeddings, RoundTripIsByteIdentical) {
  ScratchDir dir("emb");
  Rng rng(3);
  for (auto kind : {EmbeddingKind::entity_name, EmbeddingKind::entity_description, EmbeddingKind::relation_name, EmbeddingKind::fused}) {
    const auto t = test::random_table(rng, 7, 5, kind);
    write_embeddings(dir.file("a.emb"), t);
    const auto first = test::read_file(dir.file("a.emb"));
    write_embeddings(dir.file("b.emb"), read_embeddings(dir.file("a.emb")));
    EXPECT_EQ(first, test::read_file(dir.file("b.emb")));
  }
}

TEST(ReadEmbeddings, MissingFileIsInputError) { EXPECT_THROW(read_embeddings("/nonexistent/x.emb"), InputError); }

TEST(Fuse, ConcatenatesNameThenDescription) {
  const auto n = table(EmbeddingKind::entity_name, 1, 2, {1, 0});
  const auto d = table(EmbeddingKind::entity_description, 1, 2, {0, 1});
  const auto f = fuse(n, &d);
  EXPECT_EQ(f.kind, EmbeddingKind::fused);
  EXPECT_EQ(f.data, (std::vector<float>{1, 0, 0, 1}));
}

TEST(Fuse, MissingDescriptionIsZeroBlock) {
  const auto n = table(EmbeddingKind::entity_name, 1, 2, {1, 0});
  const auto f = fuse(n, nullptr, 2);
  EXPECT_EQ(f.dim, 4u);
  EXPECT_EQ(f.data, (std::vector<float>{1, 0, 0, 0}));
}

TEST(Fuse, DefaultDimsGive1536) {
  Rng rng(1);
  const auto n = test::random_table(rng, 2, 768, EmbeddingKind::entity_name);
  const auto d = test::random_table(rng, 2, 768, EmbeddingKind::entity_description);
  const auto f = fuse(n, &d);
  EXPECT_EQ(f.dim, 1536u);
  // Two unit blocks: the fused row keeps norm sqrt(2).
  EXPECT_NEAR(row_norm(f.row(0)), std::sqrt(2.0), 1e-5);
}

TEST(Fuse, RowCountMismatchIsShapeError) {
  const auto n = table(EmbeddingKind::entity_name, 1, 1, {1});
  const auto d = table(EmbeddingKind::entity_description, 2, 1, {1, 1});
  EXPECT_THROW(fuse(n, &d), ShapeError);
}

TEST(FuseProperty, PrefixEqualsNameTable) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t count = 1 + rng.below(10), nd = 1 + rng.below(6), dd = 1 + rng.below(6);
    const auto n = test::random_table(rng, count, nd, EmbeddingKind::entity_name);
    const auto d = test::random_table(rng, count, dd, EmbeddingKind::entity_description);
    const auto f = fuse(n, &d);
    for (std::size_t i = 0; i < count; ++i)
      for (std::size_t c = 0; c < nd; ++c) ASSERT_EQ(f.row(i)[c], n.row(i)[c]);
  }
}

TEST(FallbackEncode, Deterministic) {
  const std::vector<std::string> texts{"jay chou", "taipei city", ""};
  EXPECT_EQ(fallback_encode(texts, 16, 5), fallback_encode(texts, 16, 5));
  EXPECT_NE(fallback_encode(texts, 16, 5).data, fallback_encode(texts, 16, 6).data);
}

TEST(FallbackEncode, BagOfWordsIgnoresOrder) {
  const auto t = fallback_encode({"a b", "b a", "b  a\t"}, 16, 1);
  for (std::size_t c = 0; c < 16; ++c) {
    EXPECT_EQ(t.row(0)[c], t.row(1)[c]);
    EXPECT_EQ(t.row(0)[c], t.row(2)[c]);
  }
}

TEST(FallbackEncode, RowsAreUnitNorm) {
  const auto t = fallback_encode({"one", "two words", "three more words", "", "x x x x"}, 7, 2);
  for (std::size_t i = 0; i < t.count; ++i) EXPECT_NEAR(row_norm(t.row(i)), 1.0, 1e-6);
  EXPECT_NO_THROW(validate(t));
}

TEST(FallbackEncode, EmptyTextIsOneHot) {
  const auto t = fallback_encode({"", "   "}, 9, 4);
  int ones = 0;
  for (float v : t.row(0)) ones += v == 1.0f;
  EXPECT_EQ(ones, 1);
  EXPECT_EQ(std::vector<float>(t.row(0).begin(), t.row(0).end()), std::vector<float>(t.row(1).begin(), t.row(1).end()));
}

TEST(FallbackEncode, RejectsZeroDim) { EXPECT_THROW(fallback_encode({"a"}, 0, 1), ConfigError); }

TEST(FallbackEncodeProperty, DistanceSymmetricAndZeroIffSameMultiset) {
  Rng rng(21);
  const std::vector<std::string> vocab{"alpha", "beta", "gamma", "delta", "eps", "zeta"};
  std::vector<std::string> texts;
  std::vector<std::multiset<std::string>> bags;
  for (int i = 0; i < 40; ++i) {
    std::string s;
    std::multiset<std::string> bag;
    const auto len = 1 + rng.below(4);
    for (std::uint64_t k = 0; k < len; ++k) {
      const auto& w = vocab[rng.below(vocab.size())];
      s += (k ? " " : "") + w;
      bag.insert(w);
    }
    texts.push_back(s);
    bags.push_back(bag);
  }
  const auto t = fallback_encode(texts, 256, 13);
  for (std::size_t i = 0; i < texts.size(); ++i)
    for (std::size_t j = 0; j < texts.size(); ++j) {
      const double dij = l2_distance(t.row(i), t.row(j));
      ASSERT_EQ(dij, l2_distance(t.row(j), t.row(i)));
      // Distinct bags can only collide through the L2 normalization of
      // proportional count vectors, e.g. "a" and "a a".
      auto scaled = [](const std::multiset<std::string>& b) {
        std::map<std::string, std::size_t> c;
        for (const auto& w : b) ++c[w];
        std::size_t g = 0;
        for (auto& [w, k] : c) g = std::gcd(g, k);
        for (auto& [w, k] : c) k /= g;
        return c;
      };
      EXPECT_EQ(dij < 1e-6, scaled(bags[i]) == scaled(bags[j])) << texts[i] << " | " << texts[j];
    }
}

}  // namespace
}  // namespace iclea
