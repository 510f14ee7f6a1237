#include <gtest/gtest.h>

#include <unistd.h>

#include <filesystem>

#include "../common/gradcheck.hpp"
#include "dubd/checkpoint.hpp"
#include "dubd/corpus.hpp"
#include "dubd/image_io.hpp"
#include "dubd/key_value.hpp"

using namespace dubd;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("dubd_io_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

bool same_bits(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

}  // namespace

TEST(Png, RoundTripIsExactOnQuantizedImages) {
  Rng rng(1);
  for (int c : {1, 3}) {
    const auto x = quantize_image(synthetic_image(c, 13, 21, rng));
    const auto back = decode_png(encode_png(x));
    EXPECT_TRUE(same_bits(back, x)) << "channels " << c;
  }
}

TEST(Png, QuantizationRoundsHalfToEvenAndClamps) {
  EXPECT_EQ(quantize_u8(0.5 / 255.0), 0);
  EXPECT_EQ(quantize_u8(1.5 / 255.0), 2);
  EXPECT_EQ(quantize_u8(2.5 / 255.0), 2);
  EXPECT_EQ(quantize_u8(2.6 / 255.0), 3);
  EXPECT_EQ(quantize_u8(-0.3), 0);
  EXPECT_EQ(quantize_u8(1.7), 255);
  const auto x = Tensor<float>::from_data({1, 1, 1, 3}, {-0.1f, 0.2f, 1.2f});
  const auto q = decode_png(encode_png(x));
  EXPECT_EQ(q.data()[0], 0.0f);
  EXPECT_EQ(q.data()[1], 51.0f / 255.0f);
  EXPECT_EQ(q.data()[2], 1.0f);
}

TEST(Png, RejectsGarbageAndBadShapes) {
  EXPECT_THROW(decode_png("not a png"), IoError);
  EXPECT_THROW(decode_png(""), IoError);
  EXPECT_THROW(encode_png(Tensor<float>::zeros({1, 2, 4, 4})), ShapeError);
  EXPECT_THROW(encode_png(Tensor<float>::zeros({2, 3, 4, 4})), ShapeError);
  EXPECT_THROW(read_png("/nonexistent/dir/x.png"), IoError);
}

TEST(Checkpoint, RoundTripPreservesEverything) {
  std::mt19937_64 g(2);
  DenoiserConfig cfg;
  cfg.width = 4;
  cfg.cat_blocks = 1;
  cfg.res_blocks = 1;
  cfg.encoder_hidden = 4;
  DenoiserModel<float> m{cfg, init_denoiser_params<float>(cfg, g)};
  KeyValue meta;
  meta.set("mode", "oracle-c");
  meta.set("steps", 12);
  const Checkpoint ck = make_checkpoint(m, meta);
  const std::string bytes = encode_checkpoint(ck);
  EXPECT_EQ(bytes.substr(0, 8), "DUBDCKPT");
  const Checkpoint back = decode_checkpoint(bytes);
  EXPECT_EQ(back.kind, "denoiser");
  EXPECT_EQ(back.meta.str("mode"), "oracle-c");
  EXPECT_EQ(back.meta.integer("steps"), 12);
  EXPECT_EQ(encode_checkpoint(back), bytes);
  const auto m2 = denoiser_from_checkpoint(back);
  EXPECT_EQ(m2.config, cfg);
  ASSERT_EQ(m2.params.size(), m.params.size());
  auto b = m2.params.begin();
  for (const auto& [name, t] : m.params) {
    EXPECT_EQ(b->first, name);
    EXPECT_TRUE(same_bits(b->second, t));
    ++b;
  }

  const fs::path dir = temp_dir("ckpt");
  save_checkpoint(ck, (dir / "d.ckpt").string());
  EXPECT_EQ(encode_checkpoint(load_checkpoint((dir / "d.ckpt").string())), bytes);
  fs::remove_all(dir);
}

TEST(Checkpoint, RejectsCorruptOrMismatchedFiles) {
  std::mt19937_64 g(3);
  CenetConfig cc;
  cc.width = 4;
  const Checkpoint ck = make_checkpoint(CenetModel<float>{cc, init_cenet_params<float>(cc, g)});
  const std::string bytes = encode_checkpoint(ck);
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), IoError);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), IoError);
  EXPECT_THROW(decode_checkpoint(bytes + "z"), IoError);
  std::string version = bytes;
  version[8] = 9;
  EXPECT_THROW(decode_checkpoint(version), IoError);
  EXPECT_THROW(load_checkpoint("/nonexistent.ckpt"), IoError);
  EXPECT_THROW(denoiser_from_checkpoint(ck), ConfigError);
  Checkpoint wrong = ck;
  wrong.model.set("width", 8);
  EXPECT_THROW(cenet_from_checkpoint(wrong), ConfigError);
  EXPECT_NO_THROW(cenet_from_checkpoint(ck));
}

TEST(KeyValueTest, ParsesCommentsWhitespaceAndTypes) {
  const auto kv = KeyValue::parse("# comment\n a = 1.5 \n\nname=hello world\r\nlist = 1, 2,3\nflag = yes\nlast = 7");
  EXPECT_DOUBLE_EQ(kv.num("a"), 1.5);
  EXPECT_EQ(kv.str("name"), "hello world");
  EXPECT_EQ(kv.list("list"), (std::vector<double>{1, 2, 3}));
  EXPECT_TRUE(kv.flag("flag", false));
  EXPECT_EQ(kv.integer("last"), 7);
  EXPECT_EQ(kv.num("missing", 2.0), 2.0);
  EXPECT_THROW((void)kv.str("missing"), ConfigError);
  EXPECT_THROW((void)kv.num("name"), ConfigError);
  EXPECT_THROW((void)kv.integer("a"), ConfigError);
  EXPECT_THROW((void)kv.flag("name", false), ConfigError);
  EXPECT_THROW(KeyValue::parse("no equals sign"), ConfigError);
  EXPECT_THROW(KeyValue::parse(" = 3"), ConfigError);
  EXPECT_THROW(KeyValue::load("/nonexistent.cfg"), IoError);
}

TEST(KeyValueTest, RoundTripAndSections) {
  KeyValue kv;
  kv.set("x", 0.1);
  kv.set("model.width", 64);
  kv.set("model.name", "cat");
  kv.set("x", 0.2);
  const auto back = KeyValue::parse(kv.to_string());
  EXPECT_EQ(back.to_string(), kv.to_string());
  EXPECT_EQ(back.num("x"), 0.2);
  const auto sec = back.section("model.");
  EXPECT_EQ(sec.items().size(), 2u);
  EXPECT_EQ(sec.integer("width"), 64);
}

TEST(Corpus, SyntheticSpecsAndDirectories) {
  const auto a = load_corpus("synthetic:3:24:5"), b = load_corpus("synthetic:3:24:5");
  ASSERT_EQ(a.size(), 3u);
  EXPECT_EQ(a[0].shape(), (Shape{1, 3, 24, 24}));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(same_bits(a[i], b[i]));
  EXPECT_FALSE(same_bits(a[0], load_corpus("synthetic:1:24:6")[0]));
  for (float v : a[1].data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  EXPECT_THROW(load_corpus("synthetic:x"), ConfigError);
  EXPECT_THROW(load_corpus("/nonexistent/corpus"), IoError);

  const fs::path dir = temp_dir("corpus");
  EXPECT_THROW(load_corpus(dir.string()), ConfigError);
  write_png(quantize_image(a[1]), (dir / "b.png").string());
  write_png(quantize_image(a[0]), (dir / "a.png").string());
  const auto loaded = load_corpus(dir.string());
  ASSERT_EQ(loaded.size(), 2u);
  EXPECT_TRUE(same_bits(loaded[0], quantize_image(a[0])));
  EXPECT_EQ(load_corpus((dir / "b.png").string()).size(), 1u);
  fs::remove_all(dir);
}
