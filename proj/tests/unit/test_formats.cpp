#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>

#include "refinery/blob.hpp"
#include "refinery/config.hpp"
#include "refinery/error.hpp"
#include "test_util.hpp"

namespace refinery {
namespace {

using testing::bitwise_equal;

std::uint32_t read_u32(const std::vector<std::uint8_t>& b, std::size_t pos) {
  return static_cast<std::uint32_t>(b[pos]) | static_cast<std::uint32_t>(b[pos + 1]) << 8 |
         static_cast<std::uint32_t>(b[pos + 2]) << 16 | static_cast<std::uint32_t>(b[pos + 3]) << 24;
}

// ------------------------------------------------------------------- RNTB

TEST(Rntb, HeaderLayoutIsLittleEndian) {
  const Tensor t(Shape{1, 2, 1, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  const auto bytes = encode_blob(Blob::from_tensor(t));
  ASSERT_EQ(bytes.size(), 4u + 4 + 1 + 4 + 4 * 4 + 6 * 8);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "RNTB");
  EXPECT_EQ(read_u32(bytes, 4), 1u);
  EXPECT_EQ(bytes[8], 1);  // f64
  EXPECT_EQ(read_u32(bytes, 9), 4u);
  EXPECT_EQ(read_u32(bytes, 13), 1u);
  EXPECT_EQ(read_u32(bytes, 17), 2u);
  EXPECT_EQ(read_u32(bytes, 21), 1u);
  EXPECT_EQ(read_u32(bytes, 25), 3u);
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) bits = bits << 8 | bytes[29 + i];
  EXPECT_EQ(bits, std::bit_cast<std::uint64_t>(1.0));
}

TEST(Rntb, F64RoundTripIsBitExactIncludingSpecialValues) {
  SplitMix64 rng(1);
  Tensor t = testing::random_tensor({2, 3, 4, 5}, rng, 1e3);
  t.data()[0] = -0.0;
  t.data()[1] = std::numeric_limits<double>::denorm_min();
  t.data()[2] = std::numeric_limits<double>::infinity();
  t.data()[3] = std::numeric_limits<double>::max();
  const auto bytes = encode_blob(Blob::from_tensor(t));
  std::size_t pos = 0;
  const Blob back = decode_blob(bytes, pos);
  EXPECT_EQ(pos, bytes.size());
  EXPECT_TRUE(bitwise_equal(back.to_tensor(), t));
  EXPECT_TRUE(std::signbit(back.to_tensor().data()[0]));
  EXPECT_EQ(encode_blob(back), bytes);
}

TEST(Rntb, F32AndU8Payloads) {
  const Tensor t(Shape{1, 1, 1, 3}, std::vector<double>{0.5, -2.25, 1e10});
  const Blob f = Blob::from_tensor(t, DType::kF32);
  EXPECT_EQ(f.payload.size(), 12u);
  EXPECT_EQ(f.to_tensor().data()[1], -2.25);
  EXPECT_EQ(f.to_tensor().data()[2], static_cast<double>(static_cast<float>(1e10)));

  const std::vector<std::uint8_t> raw{0, 7, 255};
  const Blob u = Blob::from_bytes(raw);
  EXPECT_EQ(u.dtype, DType::kU8);
  EXPECT_EQ(u.element_count(), 3u);
  std::size_t pos = 0;
  EXPECT_EQ(decode_blob(encode_blob(u), pos), u);

  const std::uint64_t words[] = {0, 1, 0xFFFFFFFFFFFFFFFFULL, 0x0123456789ABCDEFULL};
  EXPECT_EQ(Blob::from_u64(words).to_u64(), std::vector<std::uint64_t>(words, words + 4));
  EXPECT_EQ(Blob::from_text("a = b\n").to_text(), "a = b\n");
}

TEST(Rntb, LowerRanksPadOnTheLeft) {
  Blob b;
  b.dims = {2, 3};
  b.payload.resize(6 * 8);
  EXPECT_EQ(b.to_tensor().shape(), (Shape{1, 1, 2, 3}));
}

TEST(Rntb, CorruptInputsAreRejected) {
  const auto good = encode_blob(Blob::from_tensor(Tensor(Shape{1, 1, 2, 2}, 1.0)));
  auto bad_magic = good;
  bad_magic[0] = 'X';
  auto bad_version = good;
  bad_version[4] = 2;
  auto bad_dtype = good;
  bad_dtype[8] = 9;
  auto truncated = good;
  truncated.pop_back();
  for (const auto* bytes : {&bad_magic, &bad_version, &bad_dtype, &truncated}) {
    std::size_t pos = 0;
    EXPECT_THROW(decode_blob(*bytes, pos), IoError);
  }
  Blob mismatch;
  mismatch.dims = {1, 1, 2, 2};
  mismatch.payload.resize(3);
  EXPECT_THROW(mismatch.to_tensor(), IoError);
}

TEST(Archive, IndexLayoutAndRoundTrip) {
  BlobArchive ar;
  ar.put("a", Blob::from_text("x"));
  ar.put("bb", Blob::from_tensor(Tensor(Shape{1, 1, 1, 2}, 3.0)));
  const auto bytes = ar.serialize();
  EXPECT_EQ(read_u32(bytes, 0), 2u);
  EXPECT_EQ(read_u32(bytes, 4), 1u);
  EXPECT_EQ(bytes[8], 'a');
  std::uint64_t off = 0;
  for (int i = 7; i >= 0; --i) off = off << 8 | bytes[9 + i];
  EXPECT_EQ(std::string(bytes.begin() + off, bytes.begin() + off + 4), "RNTB");
  const BlobArchive back = BlobArchive::deserialize(bytes);
  EXPECT_EQ(back.serialize(), bytes);
  EXPECT_EQ(back.get("a").to_text(), "x");
  EXPECT_THROW(back.get("zz"), IoError);
  EXPECT_TRUE(back.contains("bb"));
}

TEST(Archive, SaveReplacesAtomicallyAndLoadsBack) {
  const std::string path = ::testing::TempDir() + "/refinery_archive.rntb";
  BlobArchive a;
  a.put("v", Blob::from_text("one"));
  a.save(path);
  BlobArchive b;
  b.put("v", Blob::from_text("two"));
  b.save(path);
  EXPECT_EQ(BlobArchive::load(path).get("v").to_text(), "two");
  EXPECT_FALSE(std::filesystem::exists(path + ".tmp"));
  std::filesystem::remove(path);
  EXPECT_THROW(BlobArchive::load(path), IoError);
}

TEST(Archive, TruncatedIndexIsRejected) {
  BlobArchive ar;
  ar.put("name", Blob::from_text("payload"));
  auto bytes = ar.serialize();
  bytes.resize(6);
  EXPECT_THROW(BlobArchive::deserialize(bytes), IoError);
}

// ----------------------------------------------------------------- config

TEST(Config, ParsesSectionsCommentsAndWhitespace) {
  const RunConfig c = RunConfig::parse(
      "# top comment\n[model]\n variant = cascade2  # trailing\nnum_classes=4\n\n[train]\nlr = 0.5\n");
  EXPECT_EQ(*c.section("model").find("variant"), "cascade2");
  EXPECT_EQ(*c.section("model").find("num_classes"), "4");
  EXPECT_EQ(*c.section("train").find("lr"), "0.5");
  EXPECT_TRUE(c.section("absent").items().empty());
  EXPECT_EQ(c.section_names(), (std::vector<std::string>{"model", "train"}));
}

TEST(Config, TextRoundTripAndOverrides) {
  RunConfig c = RunConfig::parse("[b]\nz = 1\na = 2\n[a]\nk = v\n");
  EXPECT_EQ(RunConfig::parse(c.to_text()).to_text(), c.to_text());
  c.apply_override("b.z=5");
  c.apply_override(" train.lr = 0.1 ");
  EXPECT_EQ(*c.section("b").find("z"), "5");
  EXPECT_EQ(c.section("b").items().front().first, "z");
  EXPECT_EQ(*c.section("train").find("lr"), "0.1");
  EXPECT_THROW(c.apply_override("nodot=1"), ValidationError);
  EXPECT_THROW(c.apply_override("a.b"), ValidationError);
}

TEST(Config, SyntaxErrorsNameTheLine) {
  for (const char* text : {"[model\n", "[m]\nnovalue\n", "key = 1\n", "[m]\n = 3\n"}) {
    EXPECT_THROW(RunConfig::parse(text), ValidationError) << text;
  }
  try {
    RunConfig::parse("[m]\na = 1\n\nbroken\n");
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("line 4"), std::string::npos);
  }
  EXPECT_THROW(RunConfig::load("/nonexistent/refinery.cfg"), IoError);
}

TEST(Config, TypedReaderValidatesAndTracksUnknownKeys) {
  ConfigSection s;
  s.set("n", "12");
  s.set("x", "2.5e-3");
  s.set("flag", "yes");
  s.set("list", "1, 2,3");
  s.set("reals", "0.8,1,1.2");
  s.set("big", "18446744073709551615");
  SectionReader r(s, "sec");
  EXPECT_EQ(r.get_int("n", 0), 12);
  EXPECT_EQ(r.get_double("x", 0), 2.5e-3);
  EXPECT_TRUE(r.get_bool("flag", false));
  EXPECT_EQ(r.get_ints("list", {}), (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(r.get_doubles("reals", {}), (std::vector<double>{0.8, 1.0, 1.2}));
  EXPECT_EQ(r.get_u64("big", 0), 18446744073709551615ULL);
  EXPECT_EQ(r.get_int("missing", 7), 7);
  EXPECT_NO_THROW(r.finish());

  s.set("typo", "1");
  SectionReader r2(s, "sec");
  r2.get_int("n", 0);
  try {
    r2.finish();
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("unknown key"), std::string::npos);
  }

  ConfigSection bad;
  bad.set("n", "12x");
  bad.set("b", "maybe");
  bad.set("l", "1,,2");
  SectionReader r3(bad, "sec");
  EXPECT_THROW(r3.get_int("n", 0), ValidationError);
  EXPECT_THROW(r3.get_bool("b", false), ValidationError);
  EXPECT_THROW(r3.get_ints("l", {}), ValidationError);
}

TEST(Config, DoublesFormatShortestRoundTrip) {
  for (double v : {0.1, 5e-4, 1.0 / 3.0, 1e300, 0.0}) {
    ConfigSection s;
    s.set("v", format_double(v));
    SectionReader r(s, "s");
    EXPECT_EQ(r.get_double("v", -1), v);
  }
  EXPECT_EQ(format_double(0.05), "0.05");
  EXPECT_EQ(join_doubles({0.8, 1.0, 1.2}), "0.8,1,1.2");
  EXPECT_EQ(join_ints({16, 32}), "16,32");
}

}  // namespace
}  // namespace refinery
