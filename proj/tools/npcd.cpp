// Copyright Contributors to the NPCD Project
// SPDX-License-Identifier: Apache-2.0
//
// npcd: command-line entry point for the neural point cloud diffusion
// pipeline. Exit codes: 0 success, 2 configuration, 3 I/O, 4 numerical.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <Eigen/Core>

#include "npcd/pipeline.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumerical = 4;

struct GlobalArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> precision;
  std::optional<double> lambda_tv;
  std::optional<double> lambda_kl;
};

void apply_thread_env() {
  const char* env = std::getenv("NPCD_THREADS");
  if (env == nullptr || *env == '\0') return;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1) throw npcd::ConfigError("NPCD_THREADS must be a positive integer");
  Eigen::setNbThreads(static_cast<int>(n));
}

npcd::RunConfig load_config(const GlobalArgs& g, bool seed_is_dataset_seed = false) {
  nlohmann::json j = g.config_path.empty() ? nlohmann::json::object() : npcd::read_json_file(g.config_path);
  npcd::RunConfig cfg = npcd::run_config_from_json(j);
  if (g.seed) (seed_is_dataset_seed ? cfg.dataset.seed : cfg.seed) = *g.seed;
  if (g.precision) {
    if (*g.precision != "float" && *g.precision != "double") throw npcd::ConfigError("--precision must be float or double");
    cfg.precision = *g.precision;
  }
  if (g.lambda_tv) cfg.autodecoder.lambda_tv = *g.lambda_tv;
  if (g.lambda_kl) cfg.autodecoder.lambda_kl = *g.lambda_kl;
  cfg.autodecoder.validate();
  return cfg;
}

void print(const nlohmann::json& j) { std::cout << j.dump(2) << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural point cloud diffusion: data, training, sampling and evaluation"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalArgs g;
  app.add_option("--config", g.config_path, "Run configuration (JSON)")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Seed override (dataset seed for gen-data)");
  app.add_option("--precision", g.precision, "float or double");

  std::string out;
  auto* gen = app.add_subcommand("gen-data", "Generate the procedural toy dataset");
  gen->add_option("--out", out, "Output directory")->required();

  std::string data_dir;
  npcd::TrainOptions train_opt;
  std::optional<std::uint64_t> stop_after;
  auto* tad = app.add_subcommand("train-autodecoder", "Fit the shared decoder and per-object features");
  tad->add_option("--data", data_dir, "Dataset directory")->required();
  tad->add_option("--out", out, "Output directory")->required();
  tad->add_option("--lambda-tv", g.lambda_tv, "Override autodecoder.lambda_tv");
  tad->add_option("--lambda-kl", g.lambda_kl, "Override autodecoder.lambda_kl");
  tad->add_option("--checkpoint-every", train_opt.checkpoint_every, "Checkpoint cadence in steps");
  tad->add_option("--stop-after", stop_after, "Stop after this many total steps, leaving a checkpoint");

  std::string clouds_dir;
  auto* tdf = app.add_subcommand("train-diffusion", "Train the denoiser on fitted clouds");
  tdf->add_option("--clouds", clouds_dir, "Directory of fitted .npcd clouds with stats.json")->required();
  tdf->add_option("--out", out, "Output directory")->required();
  tdf->add_option("--checkpoint-every", train_opt.checkpoint_every, "Checkpoint cadence in steps");
  tdf->add_option("--stop-after", stop_after, "Stop after this many total steps, leaving a checkpoint");

  std::string checkpoint;
  std::string mode = "unconditional";
  std::optional<std::string> preset;
  std::optional<int> n_rev;
  std::optional<int> n_repaint;
  std::optional<int> n_resample;
  npcd::SampleOptions sopt;
  bool raw_weights = false;
  auto* smp = app.add_subcommand("sample", "Sample clouds from a trained denoiser");
  smp->add_option("--checkpoint", checkpoint, "train-diffusion output directory")->required();
  smp->add_option("--out", out, "Output directory")->required();
  smp->add_option("--mode", mode, "unconditional, appearance-only or shape-only");
  smp->add_option("--input", sopt.input, "Conditioning .npcd file for the conditional modes");
  smp->add_option("--count", sopt.count, "Number of samples");
  smp->add_option("--preset", preset, "Named sampler preset");
  smp->add_option("--n-rev", n_rev, "Final reverse-takeover steps");
  smp->add_option("--n-repaint", n_repaint, "Upper timestep of the resampling window");
  smp->add_option("--n-resample", n_resample, "Resampling repetitions per step");
  smp->add_flag("--trajectory", sopt.trajectory, "Dump every 100th intermediate state");
  smp->add_flag("--raw-weights", raw_weights, "Use the raw weights instead of the EMA");
  smp->add_option("--decoder", sopt.decoder_dir, "train-autodecoder output directory (enables renders)");
  smp->add_option("--cameras", sopt.cameras_file, "cameras.json to render from");
  smp->add_option("--views", sopt.views, "Number of spiral test views when no cameras are given");

  std::string generated;
  std::string reference;
  std::optional<std::string> eval_out;
  std::optional<std::string> metrics_list;
  npcd::EvalOptions eopt;
  auto* evl = app.add_subcommand("eval", "Compare generated and reference clouds");
  evl->add_option("--generated", generated, "Directory of generated .npcd files")->required();
  evl->add_option("--reference", reference, "Directory of reference .npcd files")->required();
  evl->add_option("--out", eval_out, "Directory for report.json");
  evl->add_option("--metrics", metrics_list, "Comma-separated subset of chamfer,emd,psnr");
  evl->add_option("--generated-renders", eopt.generated_renders, "Generated renders (PPM) for psnr");
  evl->add_option("--reference-renders", eopt.reference_renders, "Reference renders (PPM) for psnr");

  std::string decoder_dir;
  std::string cloud_file;
  std::optional<std::string> cameras;
  int views = 4;
  auto* rnd = app.add_subcommand("render", "Render a cloud with a trained decoder");
  rnd->add_option("--decoder", decoder_dir, "train-autodecoder output directory")->required();
  rnd->add_option("--cloud", cloud_file, "Point cloud (.npcd)")->required()->check(CLI::ExistingFile);
  rnd->add_option("--out", out, "Output directory")->required();
  rnd->add_option("--cameras", cameras, "cameras.json to render from");
  rnd->add_option("--views", views, "Number of spiral test views when no cameras are given");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    apply_thread_env();
    train_opt.stop_after = stop_after;
    if (*gen) {
      print(npcd::run_gen_data(load_config(g, true), out));
    } else if (*tad) {
      print(npcd::run_train_autodecoder(load_config(g), data_dir, out, train_opt));
    } else if (*tdf) {
      print(npcd::run_train_diffusion(load_config(g), clouds_dir, out, train_opt));
    } else if (*smp) {
      npcd::RunConfig cfg = load_config(g);
      if (preset) cfg.sampler = npcd::sampler_preset(*preset);
      if (n_rev) cfg.sampler.n_rev = *n_rev;
      if (n_repaint) cfg.sampler.n_repaint = *n_repaint;
      if (n_resample) cfg.sampler.n_resample = *n_resample;
      sopt.mode = npcd::parse_sample_mode(mode);
      sopt.use_ema = !raw_weights;
      print(npcd::run_sample(cfg, checkpoint, out, sopt));
    } else if (*evl) {
      npcd::RunConfig cfg = load_config(g);
      if (metrics_list) {
        cfg.eval = {false, false, false};
        std::string item;
        std::istringstream ss(*metrics_list);
        while (std::getline(ss, item, ',')) {
          if (item == "chamfer") {
            cfg.eval.chamfer = true;
          } else if (item == "emd") {
            cfg.eval.emd = true;
          } else if (item == "psnr") {
            cfg.eval.psnr = true;
          } else {
            throw npcd::ConfigError("unknown metric '" + item + "' (chamfer, emd, psnr)");
          }
        }
      }
      print(npcd::run_eval(cfg, generated, reference, eval_out, eopt));
    } else if (*rnd) {
      print(npcd::run_render(load_config(g), decoder_dir, cloud_file, out, cameras, views));
    }
  } catch (const npcd::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const npcd::IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kExitIo;
  } catch (const npcd::FormatError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kExitIo;
  } catch (const npcd::Error& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  }
  return 0;
}
