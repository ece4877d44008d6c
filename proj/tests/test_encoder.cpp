#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "attnkit/encoder.hpp"
#include "attnkit/tensor.hpp"

using namespace attnkit;

namespace {

EncoderConfig tiny_cfg() {
  EncoderConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.embed_dim = 8;
  cfg.num_layers = 1;
  cfg.num_heads = 2;
  cfg.mlp_ratio = 2.0;
  return cfg;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const char* tag) {
    path = std::filesystem::temp_directory_path() / (std::string("attnkit_") + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("token count follows the patch grid") {
  auto small = tiny_cfg();
  CHECK(small.num_tokens() == 4);
  EncoderConfig big;
  big.image_size = 64;
  big.patch_size = 8;
  CHECK(big.num_tokens() == 64);
}

TEST_CASE("patch extraction flattens each patch row-major") {
  EncoderConfig cfg;
  cfg.image_size = 4;
  cfg.patch_size = 2;
  cfg.embed_dim = 4;
  cfg.num_heads = 1;
  Tensor<double> image({4, 4, 1});
  for (Index i = 0; i < 16; ++i) image[i] = static_cast<double>(i);
  auto patches = extract_patches(image, cfg);
  CHECK(patches.rows() == 4);
  CHECK(patches.cols() == 4);
  // top-left patch: pixels (0,0),(0,1),(1,0),(1,1)
  CHECK(patches(0, 0) == 0.0);
  CHECK(patches(0, 1) == 1.0);
  CHECK(patches(0, 2) == 4.0);
  CHECK(patches(0, 3) == 5.0);
  // bottom-right patch starts at (2,2)
  CHECK(patches(3, 0) == 10.0);
  CHECK(patches(3, 3) == 15.0);
}

TEST_CASE("wrong image geometry is rejected") {
  auto cfg = tiny_cfg();
  Tensor<double> wrong({4, 8, 1});
  CHECK_THROWS_AS(extract_patches(wrong, cfg), dimension_error);
  Tensor<double> rank2({8, 8});
  CHECK_THROWS_AS(extract_patches(rank2, cfg), dimension_error);
}

TEST_CASE("config invariants are enforced") {
  auto cfg = tiny_cfg();
  cfg.patch_size = 3;  // does not divide 8
  CHECK_THROWS_AS(cfg.validate(), config_error);
  cfg = tiny_cfg();
  cfg.num_heads = 3;  // does not divide D=8
  CHECK_THROWS_AS(cfg.validate(), config_error);
  cfg = tiny_cfg();
  cfg.attention_mode = AttentionMode::dilated;
  cfg.segment_len = 4;
  cfg.interval = 4;  // h=2 < r=4: coverage impossible
  CHECK_THROWS_AS(cfg.validate(), config_error);
}

TEST_CASE("zero image with zero bias embeds to the position table") {
  auto cfg = tiny_cfg();
  cfg.num_layers = 0;
  Rng rng(1);
  auto params = init_encoder_params<double>(cfg, rng);
  Tensor<double> image({8, 8, 1});
  auto tape = encoder_forward(image, params, cfg);
  CHECK(tape.features.empty());
  const auto& pos = params.at("pos").value();
  auto expect = layer_norm(pos, Tensor<double>::full({8}, 1.0), Tensor<double>::zeros({8}));
  CHECK(bitwise_equal(tape.output.value(), expect));
}

TEST_CASE("fixed seed makes init and forward bitwise reproducible") {
  auto cfg = EncoderConfig::desk_student();
  Rng rng_a(7), rng_b(7), rng_img(8);
  auto pa = init_encoder_params<double>(cfg, rng_a);
  auto pb = init_encoder_params<double>(cfg, rng_b);
  auto image = rand_uniform<double>({32, 32, 1}, rng_img);
  auto va = encoder_infer(image, pa, cfg);
  auto vb = encoder_infer(image, pb, cfg);
  CHECK(bitwise_equal(va.output, vb.output));
  REQUIRE(va.features.size() == vb.features.size());
  for (std::size_t i = 0; i < va.features.size(); ++i) CHECK(bitwise_equal(va.features[i], vb.features[i]));
}

TEST_CASE("whole-sequence single-interval dilation collapses to dense") {
  auto dense_cfg = tiny_cfg();
  auto dilated_cfg = dense_cfg;
  dilated_cfg.attention_mode = AttentionMode::dilated;
  dilated_cfg.segment_len = dilated_cfg.num_tokens();
  dilated_cfg.interval = 1;
  Rng rng(21), rng_img(22);
  auto params = init_encoder_params<double>(dense_cfg, rng);
  auto image = rand_uniform<double>({8, 8, 1}, rng_img);
  auto dense_out = encoder_infer(image, params, dense_cfg);
  auto dilated_out = encoder_infer(image, params, dilated_cfg);
  CHECK(max_abs_diff(dense_out.output, dilated_out.output) <= 1e-6);
  for (std::size_t i = 0; i < dense_out.features.size(); ++i)
    CHECK(max_abs_diff(dense_out.features[i], dilated_out.features[i]) <= 1e-6);
}

TEST_CASE("loss gradient reaches every parameter") {
  auto cfg = EncoderConfig::desk_student();
  Rng rng(31), rng_img(32), rng_tgt(33);
  auto params = init_encoder_params<double>(cfg, rng);
  auto image = rand_uniform<double>({32, 32, 1}, rng_img);
  auto target = randn<double>({cfg.num_tokens(), cfg.embed_dim}, rng_tgt);
  auto tape = encoder_forward(image, params, cfg);
  auto loss = ag::mse(tape.output, ag::leaf(target));
  ag::backward(loss);
  for (const auto& name : params.names()) {
    const auto& g = params.at(name).grad();
    double peak = 0;
    for (Index i = 0; i < g.numel(); ++i) peak = std::max(peak, std::abs(g[i]));
    CAPTURE(name);
    CHECK(peak > 0.0);
  }
}

TEST_CASE("block outputs ignore parameters of deeper blocks") {
  auto cfg = EncoderConfig::desk_student();
  Rng rng(41), rng_img(42);
  auto params = init_encoder_params<double>(cfg, rng);
  auto image = rand_uniform<double>({32, 32, 1}, rng_img);
  auto before = encoder_infer(image, params, cfg);
  params.at("block1.mlp.w1").value_mut()[0] += 10.0;
  params.at("block1.attn.wq0").value_mut()[0] += 10.0;
  auto after = encoder_infer(image, params, cfg);
  CHECK(bitwise_equal(before.features[0], after.features[0]));
  CHECK_FALSE(bitwise_equal(before.features[1], after.features[1]));
}

TEST_CASE("student preset is smaller than teacher preset") {
  Rng rng_s(51), rng_t(52);
  auto student = init_encoder_params<float>(EncoderConfig::paper_student(), rng_s);
  auto teacher = init_encoder_params<float>(EncoderConfig::paper_teacher(), rng_t);
  CHECK(student.scalar_count() < teacher.scalar_count());
}

TEST_CASE("checkpoint round-trips values and forward results") {
  TempDir dir("ckpt");
  auto cfg = tiny_cfg();
  Rng rng(61), rng_img(62);
  auto params = init_encoder_params<double>(cfg, rng);
  save_params(dir.path, params);
  auto loaded = load_params<double>(dir.path);
  REQUIRE(loaded.names() == params.names());
  for (const auto& name : params.names()) CHECK(bitwise_equal(loaded.at(name).value(), params.at(name).value()));
  auto image = rand_uniform<double>({8, 8, 1}, rng_img);
  auto a = encoder_infer(image, params, cfg);
  auto b = encoder_infer(image, loaded, cfg);
  CHECK(bitwise_equal(a.output, b.output));
}

TEST_CASE("corrupt checkpoints are refused") {
  TempDir dir("ckpt_bad");
  CHECK_THROWS_AS(load_params<double>(dir.path / "missing"), io_error);

  auto cfg = tiny_cfg();
  Rng rng(71);
  auto params = init_encoder_params<double>(cfg, rng);
  save_params(dir.path, params);
  {
    std::ofstream trash(dir.path / "manifest.json");
    trash << "{ not json";
  }
  CHECK_THROWS_AS(load_params<double>(dir.path), io_error);
}
