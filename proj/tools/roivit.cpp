#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "roivit/selftest.hpp"
#include "roivit/synthetic.hpp"
#include "roivit/train.hpp"

namespace fs = std::filesystem;
using namespace roivit;

namespace {

enum Exit : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3, kSelfTest = 4 };

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw FormatError(path.string() + ": cannot open for writing");
  out << text;
  if (!out) throw FormatError(path.string() + ": write failed");
}

int cmd_train(const fs::path& data, const fs::path& config, const fs::path& out) {
  const auto cfg = load_train_config(config);
  fs::create_directories(out);
  const auto run = run_training(cfg, data, out, std::cout);
  std::cout << "checkpoint " << run.checkpoint.string() << '\n';
  return kOk;
}

int cmd_eval(const fs::path& data, const fs::path& ckpt, RoiSource mode, std::optional<fs::path> out) {
  const auto run = run_evaluation(ckpt, data, mode);
  const auto dir = out ? *out : (ckpt.has_parent_path() ? ckpt.parent_path() : fs::path("."));
  const auto table = run.eval.report.to_table(run.class_names);
  std::cout << table;
  write_text(dir / "metrics.txt", table);
  write_text(dir / "metrics.kv", run.eval.report.to_key_values());
  return kOk;
}

int cmd_roigen(const fs::path& data, RoiSource mode, const fs::path& out, std::optional<fs::path> config,
               std::optional<fs::path> aux_ckpt) {
  const auto cfg = config ? load_train_config(*config) : TrainConfig::toy();
  const auto index = load_dataset(data);
  const auto images = load_images(index, cfg.model.image_size);
  const auto labels = dataset_labels(index);
  std::optional<AuxCnn> aux;
  if (mode == RoiSource::cam) {
    if (aux_ckpt) {
      auto ck = load_checkpoint(*aux_ckpt);
      if (!ck.aux) throw FormatError(aux_ckpt->string() + ": checkpoint holds no auxiliary classifier");
      aux = std::move(ck.aux);
    } else {
      aux = AuxCnn(3, index.class_names.size(), cfg.model.seed);
      const double loss =
          train_aux(*aux, images, labels, AuxTrainSettings{cfg.aux_epochs, cfg.batch_size, cfg.aux_lr, cfg.model.seed});
      std::cout << "auxiliary classifier trained: final loss " << loss << '\n';
    }
  }
  const auto provider = make_roi_provider(mode, cfg.roi_target, aux ? &*aux : nullptr);
  RoiCacheStats stats;
  const auto jobs = roi_jobs(index, images);
  precompute_rois(jobs, mode, provider.hash, provider.generate, out, &stats);
  std::ostringstream listing;
  listing << "# generator " << provider.hash << '\n';
  for (const auto& job : jobs) {
    listing << job.rel_path << " " << roi_cache_file(out, job.rel_path, mode, provider.hash).filename().string() << '\n';
  }
  write_text(out / "index.txt", listing.str());
  std::cout << "roi cache " << out.string() << ": " << stats.hits << " hits, " << stats.misses << " generated\n";
  return kOk;
}

int cmd_selftest(bool inject) {
  SelfTestOptions opt;
  opt.inject_gelu_sign_flip = inject;
  const auto report = run_selftest(opt, &std::cout);
  std::size_t ok = 0;
  for (const auto& c : report.checks) ok += c.passed ? 1 : 0;
  std::cout << ok << "/" << report.checks.size() << " checks passed\n";
  return report.passed() ? kOk : kSelfTest;
}

int cmd_synth(const fs::path& out, SyntheticSpec spec) {
  const auto samples = generate_synthetic(spec);
  write_synthetic(out, samples);
  std::cout << samples.size() << " images written to " << out.string() << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ROI-ViT: dual-branch vision transformer with ROI fusion"};
  app.require_subcommand(1);

  fs::path data, config, out, ckpt, image;
  std::string mode_name;
  std::optional<fs::path> opt_out, opt_config, opt_aux;
  bool inject = false;

  auto* train = app.add_subcommand("train", "Train a model and write checkpoints");
  train->add_option("--data", data, "Dataset directory (one subdirectory per class)")->required();
  train->add_option("--config", config, "Config file of key = value lines")->required();
  train->add_option("--out", out, "Output directory")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--data", data, "Dataset directory")->required();
  eval->add_option("--ckpt", ckpt, "Checkpoint manifest")->required();
  eval->add_option("--roi", mode_name, "ROI source: cam or seg")->required()->check(CLI::IsMember({"cam", "seg"}));
  eval->add_option("--out", opt_out, "Directory for metrics.txt and metrics.kv (default: checkpoint directory)");

  auto* roigen = app.add_subcommand("roigen", "Precompute ROI maps into a cache directory");
  roigen->add_option("--data", data, "Dataset directory")->required();
  roigen->add_option("--mode", mode_name, "ROI source: cam or seg")->required()->check(CLI::IsMember({"cam", "seg"}));
  roigen->add_option("--out", out, "Cache directory")->required();
  roigen->add_option("--config", opt_config, "Config file (image size, auxiliary training, roi_target)");
  roigen->add_option("--aux", opt_aux, "Checkpoint whose auxiliary classifier drives cam maps");

  auto* saliency = app.add_subcommand("saliency", "Export a Score-CAM overlay of a trained model");
  saliency->add_option("--image", image, "Input PPM image")->required();
  saliency->add_option("--ckpt", ckpt, "Checkpoint manifest")->required();
  saliency->add_option("--out", out, "Output PPM image")->required();

  auto* selftest = app.add_subcommand("selftest", "Run the numerical release gate");
  selftest->add_flag("--inject-gelu-sign-flip", inject, "Negate the GELU backward rule (the gate must fail)");

  SyntheticSpec spec;
  std::string variant = "easy";
  auto* synth = app.add_subcommand("synth", "Write a synthetic shape dataset");
  synth->add_option("--out", out, "Output directory")->required();
  synth->add_option("--classes", spec.classes, "Number of shape classes (1-6)")->capture_default_str();
  synth->add_option("--per-class", spec.per_class, "Images per class")->capture_default_str();
  synth->add_option("--size", spec.image_size, "Image side in pixels")->capture_default_str();
  synth->add_option("--variant", variant, "easy or cluttered")
      ->check(CLI::IsMember({"easy", "cluttered"}))
      ->capture_default_str();
  synth->add_option("--seed", spec.seed, "Generator seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    const RoiSource mode = mode_name == "seg" ? RoiSource::seg : RoiSource::cam;
    if (*train) return cmd_train(data, config, out);
    if (*eval) return cmd_eval(data, ckpt, mode, opt_out);
    if (*roigen) return cmd_roigen(data, mode, out, opt_config, opt_aux);
    if (*saliency) {
      export_saliency(ckpt, image, out);
      std::cout << "saliency written to " << out.string() << '\n';
      return kOk;
    }
    if (*selftest) return cmd_selftest(inject);
    if (*synth) {
      spec.variant = variant == "cluttered" ? SyntheticVariant::cluttered : SyntheticVariant::easy;
      return cmd_synth(out, spec);
    }
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kNumeric;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}
