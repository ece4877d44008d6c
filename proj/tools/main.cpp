// attnkit command line: verification suites, synthetic data, distillation
// runs, attention benchmarks, and segmentation-loss evaluation.
//
// Exit codes: 0 success, 1 contract or verification failure, 2 I/O or
// configuration failure.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "attnkit/bench.hpp"
#include "attnkit/distill.hpp"
#include "attnkit/encoder.hpp"
#include "attnkit/segloss.hpp"
#include "attnkit/synth.hpp"
#include "attnkit/tensor_io.hpp"
#include "attnkit/verify.hpp"

namespace fs = std::filesystem;
using namespace attnkit;
using nlohmann::json;

namespace {

json load_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw io_error(msg("cannot open config file ", path));
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw config_error(msg("malformed JSON in ", path, ": ", e.what()));
  }
  return j;
}

// ---- verify ----------------------------------------------------------

int cmd_verify(const std::vector<std::string>& suites, std::uint64_t seed, int workers, bool inject_fault) {
  fault::recompose_perturb = inject_fault;
  std::vector<SuiteResult> results;
  try {
    results = run_verification(suites, seed, workers);
  } catch (...) {
    fault::recompose_perturb = false;
    throw;
  }
  fault::recompose_perturb = false;

  std::printf("%-10s %7s  %s\n", "suite", "checks", "result");
  std::vector<std::string> failing;
  for (const auto& r : results) {
    std::printf("%-10s %7d  %s\n", r.name.c_str(), r.checks, r.passed() ? "PASS" : "FAIL");
    if (!r.passed()) {
      failing.push_back(r.name);
      std::fprintf(stderr, "  %s: %s\n", r.name.c_str(), r.first_failure.c_str());
    }
  }
  if (failing.empty()) return 0;
  std::string names;
  for (const auto& n : failing) names += (names.empty() ? "" : ", ") + n;
  std::fprintf(stderr, "verification failed in: %s\n", names.c_str());
  return 1;
}

// ---- gen-data --------------------------------------------------------

template <class Scalar>
int run_gen_data(const SynthConfig& cfg, const std::string& out) {
  const Index default_patch = EncoderConfig{}.patch_size;
  if (cfg.image_size % default_patch != 0)
    std::fprintf(stderr,
                 "warning: image size %lld is not divisible by the default patch size %lld; "
                 "override patch_size when training on this set\n",
                 static_cast<long long>(cfg.image_size), static_cast<long long>(default_patch));
  const auto data = synth_dataset<Scalar>(cfg);
  write_dataset(out, data, cfg);
  std::printf("wrote %lld image/mask pairs to %s\n", static_cast<long long>(cfg.count), out.c_str());
  return 0;
}

// ---- losses ----------------------------------------------------------

int cmd_losses(const std::string& pred_path, const std::string& target_path) {
  MaskPair<double> pair;
  pair.predicted = load_tensor<double>(pred_path);
  pair.target = load_tensor<double>(target_path);
  const double iou = iou_loss(pair);
  const double dice = dice_loss(pair);
  const double focal = focal_loss(pair);
  const double total = fine_tune_loss(pair);
  std::printf("iou,dice,focal,fine_tune\n");
  std::printf("%.10g,%.10g,%.10g,%.10g\n", iou, dice, focal, total);
  return 0;
}

// ---- bench -----------------------------------------------------------

template <class Scalar>
int run_bench(SweepConfig sweep, const std::string& out) {
  const auto report = run_sweep<Scalar>(sweep);
  if (out.empty())
    write_bench_csv(std::cout, report);
  else
    write_bench_csv(out, report);
  return 0;
}

// ---- distill ---------------------------------------------------------

EncoderConfig encoder_config_from_json(const json& j) {
  EncoderConfig cfg;
  const std::string preset = j.value("preset", "");
  if (preset == "paper-student")
    cfg = EncoderConfig::paper_student();
  else if (preset == "paper-teacher")
    cfg = EncoderConfig::paper_teacher();
  else if (preset == "desk" || preset == "desk-student")
    cfg = EncoderConfig::desk_student();
  else if (preset == "desk-teacher")
    cfg = EncoderConfig::desk_teacher();
  else if (!preset.empty())
    throw config_error(msg("unknown encoder preset '", preset,
                           "' (known: paper-student, paper-teacher, desk, desk-student, desk-teacher)"));

  try {
    cfg.image_size = j.value("image_size", cfg.image_size);
    cfg.patch_size = j.value("patch_size", cfg.patch_size);
    cfg.channels = j.value("channels", cfg.channels);
    cfg.embed_dim = j.value("embed_dim", cfg.embed_dim);
    cfg.num_layers = j.value("num_layers", cfg.num_layers);
    cfg.num_heads = j.value("num_heads", cfg.num_heads);
    cfg.mlp_ratio = j.value("mlp_ratio", cfg.mlp_ratio);
    if (j.contains("attention")) {
      const std::string mode = j.at("attention").get<std::string>();
      if (mode == "dense")
        cfg.attention_mode = AttentionMode::dense;
      else if (mode == "dilated")
        cfg.attention_mode = AttentionMode::dilated;
      else
        throw config_error(msg("unknown attention mode '", mode, "' (known: dense, dilated)"));
    }
    cfg.segment_len = j.value("segment_len", cfg.segment_len);
    cfg.interval = j.value("interval", cfg.interval);
    if (j.contains("kernel")) {
      const std::string k = j.at("kernel").get<std::string>();
      if (k == "naive")
        cfg.kernel = Kernel::naive;
      else if (k == "tiled")
        cfg.kernel = Kernel::tiled;
      else
        throw config_error(msg("unknown kernel '", k, "' (known: naive, tiled)"));
    }
    cfg.tile_size = j.value("tile_size", cfg.tile_size);
  } catch (const json::exception& e) {
    throw config_error(msg("bad encoder config: ", e.what()));
  }
  cfg.validate();
  return cfg;
}

DistillConfig distill_config_from_json(const json& j, const EncoderConfig& student, const EncoderConfig& teacher,
                                       int workers) {
  DistillConfig cfg;
  try {
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.grad_accum = j.value("grad_accum", cfg.grad_accum);
    cfg.lambda = j.value("lambda", cfg.lambda);
    cfg.uniform_weights = j.value("uniform_weights", cfg.uniform_weights);
    cfg.schedule.delta_t = j.value("delta_t", cfg.schedule.delta_t);
    cfg.schedule.t1 = j.value("t1", cfg.schedule.t1);
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      const std::string kind = o.value("kind", "adam");
      if (kind == "sgd")
        cfg.optimizer.kind = OptimizerKind::sgd;
      else if (kind == "adam")
        cfg.optimizer.kind = OptimizerKind::adam;
      else
        throw config_error(msg("unknown optimizer '", kind, "' (known: sgd, adam)"));
      cfg.optimizer.lr = o.value("lr", cfg.optimizer.lr);
    }
    if (j.contains("layer_map")) {
      for (const auto& pair : j.at("layer_map")) {
        if (!pair.is_array() || pair.size() != 2)
          throw config_error("layer_map entries must be [student_block, teacher_block] pairs");
        cfg.layer_map.emplace_back(pair.at(0).get<int>(), pair.at(1).get<int>());
      }
    } else {
      cfg.layer_map = uniform_layer_map(student.num_layers, teacher.num_layers);
    }
  } catch (const json::exception& e) {
    throw config_error(msg("bad distill config: ", e.what()));
  }
  cfg.schedule.num_focus_layers = static_cast<int>(cfg.layer_map.size());
  cfg.workers = workers;
  return cfg;
}

template <class Scalar>
int run_distill(const json& j, const std::string& out, std::uint64_t seed, int workers) {
  if (!j.contains("teacher") || !j.contains("student"))
    throw config_error("distill config needs \"teacher\" and \"student\" sections");
  const EncoderConfig teacher_cfg = encoder_config_from_json(j.at("teacher"));
  const EncoderConfig student_cfg = encoder_config_from_json(j.at("student"));
  const DistillConfig cfg = distill_config_from_json(j, student_cfg, teacher_cfg, workers);

  std::vector<Tensor<Scalar>> images;
  const json data = j.value("data", json::object());
  if (data.contains("dir")) {
    for (auto& sample : load_dataset<Scalar>(data.at("dir").get<std::string>()))
      images.push_back(std::move(sample.image));
  } else {
    SynthConfig synth;
    synth.count = data.value("count", Index(64));
    synth.image_size = data.value("image_size", teacher_cfg.image_size);
    synth.seed = data.value("seed", seed + 1);
    for (auto& sample : synth_dataset<Scalar>(synth)) images.push_back(std::move(sample.image));
  }

  Rng init_rng(seed);
  auto teacher_params = init_encoder_params<Scalar>(teacher_cfg, init_rng);
  auto student_params = init_encoder_params<Scalar>(student_cfg, init_rng);

  Rng train_rng(seed ^ 0x9e3779b97f4a7c15ull);
  const auto run = run_distillation(teacher_params, teacher_cfg, student_params, student_cfg, images, cfg, train_rng);

  fs::create_directories(fs::path(out));
  save_params(fs::path(out) / "checkpoint", student_params);
  if (run.adapters.size() > 0) save_params(fs::path(out) / "adapters", run.adapters);
  write_loss_csv((fs::path(out) / "losses.csv").string(), run.history);

  json summary;
  summary["teacher"] = {{"embed_dim", teacher_cfg.embed_dim}, {"num_layers", teacher_cfg.num_layers}};
  summary["student"] = {{"embed_dim", student_cfg.embed_dim}, {"num_layers", student_cfg.num_layers}};
  summary["epochs"] = cfg.epochs;
  summary["images"] = images.size();
  summary["seed"] = seed;
  const auto epochs = epoch_mean_integrated(run.history);
  summary["first_epoch_integrated"] = epochs.front().second;
  summary["final_epoch_integrated"] = epochs.back().second;
  std::ofstream os(fs::path(out) / "run.json");
  if (!os) throw io_error(msg("cannot write run summary in ", out));
  os << summary.dump(2) << "\n";

  for (const auto& [epoch, mean] : epochs) std::printf("epoch %d: integrated loss %.6g\n", epoch, mean);
  std::printf("checkpoint and loss CSV written to %s\n", out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attnkit: dilated attention kernels, layer-wise distillation, segmentation losses"};
  app.require_subcommand(1);

  std::uint64_t seed = 7;
  int workers = 1;
  std::string dtype = "f64";
  std::string config_path, out_path;

  auto* verify = app.add_subcommand("verify", "run the self-check suites against built-in oracles");
  std::vector<std::string> suites;
  bool inject_fault = false;
  verify->add_option("--suite", suites, "suite to run (repeatable); default: all");
  verify->add_option("--seed", seed, "RNG seed for randomized checks");
  verify->add_option("--workers", workers, "worker threads for parallel kernels");
  verify->add_flag("--inject-fault", inject_fault, "perturb the recompose step to prove the checks can fail")
      ->group("");

  auto* gen = app.add_subcommand("gen-data", "write a synthetic blob/mask dataset");
  SynthConfig synth;
  gen->add_option("--count", synth.count, "number of image/mask pairs")->capture_default_str();
  gen->add_option("--image-size", synth.image_size, "square image side in pixels")->capture_default_str();
  gen->add_option("--seed", synth.seed, "dataset seed; same seed gives identical bytes")->capture_default_str();
  gen->add_option("--noise", synth.noise_stddev, "pixel noise stddev")->capture_default_str();
  gen->add_option("--out", out_path, "output directory")->required();
  gen->add_option("--dtype", dtype, "tensor precision")
      ->check(CLI::IsMember({"f32", "f64"}))
      ->capture_default_str();

  auto* distill = app.add_subcommand("distill", "train a student encoder against a teacher");
  distill->add_option("--config", config_path, "JSON config")->required();
  distill->add_option("--out", out_path, "output directory for checkpoint, CSV, summary")->required();
  distill->add_option("--seed", seed, "seed for init, data, and shuffling")->capture_default_str();
  distill->add_option("--workers", workers, "worker threads for teacher feature caching")->capture_default_str();
  distill->add_option("--dtype", dtype, "training precision")
      ->check(CLI::IsMember({"f32", "f64"}))
      ->capture_default_str();

  auto* bench = app.add_subcommand("bench", "time dense vs dilated attention over a config sweep");
  bench->add_option("--config", config_path, "JSON sweep config")->required();
  bench->add_option("--out", out_path, "CSV output path; default stdout");
  bench->add_option("--seed", seed, "override the sweep seed");
  bench->add_option("--workers", workers, "override the sweep worker count");
  bench->add_option("--dtype", dtype, "kernel precision")
      ->check(CLI::IsMember({"f32", "f64"}))
      ->capture_default_str();

  auto* losses = app.add_subcommand("losses", "print IoU/Dice/focal/fine-tune losses for a mask pair");
  std::string pred_path, target_path;
  losses->add_option("--pred", pred_path, "predicted mask tensor file (values in [0,1])")->required();
  losses->add_option("--target", target_path, "binary target mask tensor file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*verify) return cmd_verify(suites, seed, workers, inject_fault);
    if (*gen) {
      return dtype == "f32" ? run_gen_data<float>(synth, out_path) : run_gen_data<double>(synth, out_path);
    }
    if (*losses) return cmd_losses(pred_path, target_path);
    if (*bench) {
      SweepConfig sweep = sweep_config_from_json(load_json(config_path));
      if (bench->count("--seed") > 0) sweep.seed = seed;
      if (bench->count("--workers") > 0) sweep.workers = workers;
      return dtype == "f32" ? run_bench<float>(sweep, out_path) : run_bench<double>(sweep, out_path);
    }
    if (*distill) {
      const json j = load_json(config_path);
      return dtype == "f32" ? run_distill<float>(j, out_path, seed, workers)
                            : run_distill<double>(j, out_path, seed, workers);
    }
  } catch (const io_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const config_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
