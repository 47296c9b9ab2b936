// Copyright 2026 The emofuse Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line surface: synth, features, train, evaluate, ablate, predict,
// gradcheck.

#include <cstdio>
#include <deque>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "emofuse/config.hpp"
#include "emofuse/gradcheck_suite.hpp"
#include "emofuse/pipeline.hpp"
#include "emofuse/synth.hpp"

using namespace emofuse;

namespace {

// Optional flag values collected by CLI11; applied over the config file so
// flags always win.
struct FlagOverrides {
  std::string config_file;
  // Deque keeps element references stable while flags keep binding.
  std::deque<std::pair<std::string, std::optional<std::string>>> values;

  void bind(CLI::App* cmd, const char* key, const char* flag, const char* help) {
    values.emplace_back(key, std::nullopt);
    auto& slot = values.back().second;
    cmd->add_option_function<std::string>(
        flag, [&slot](const std::string& v) { slot = v; }, help);
  }

  RunConfig resolve() const {
    RunConfig rc;
    if (!config_file.empty()) apply_config_file(rc, config_file);
    for (const auto& [key, value] : values)
      if (value) apply_config_value(rc, key, *value);
    apply_env_overrides(rc);
    return rc;
  }
};

void add_common_flags(CLI::App* cmd, FlagOverrides& flags) {
  cmd->add_option("--config", flags.config_file, "flat key = value config file");
  flags.bind(cmd, "seed", "--seed", "master random seed");
  flags.bind(cmd, "scale", "--scale", "width scale factor in (0,1]");
  flags.bind(cmd, "out_dir", "--out", "output directory");
  flags.bind(cmd, "manifest", "--manifest", "dataset manifest (TSV)");
  flags.bind(cmd, "embeddings", "--embeddings", "word embedding file");
  flags.bind(cmd, "external_lld", "--external-lld", "externally computed LLD CSV");
  flags.bind(cmd, "cache_dir", "--cache-dir", "feature cache directory");
  flags.bind(cmd, "branches", "--branches", "active branches, e.g. word+mfsc or all");
  flags.bind(cmd, "regime", "--regime", "training regime: together | separate");
  flags.bind(cmd, "epochs", "--epochs", "training epochs");
  flags.bind(cmd, "batch_size", "--batch", "batch size (>= 2)");
  flags.bind(cmd, "learning_rate", "--lr", "Adam learning rate");
  flags.bind(cmd, "precision", "--precision", "float | double");
  flags.bind(cmd, "checkpoint", "--checkpoint", "model checkpoint path");
  flags.bind(cmd, "check_finite", "--check-finite", "trap NaN/Inf on every op output");
  flags.bind(cmd, "dropout_conv", "--dropout-conv", "dropout rate after conv layers");
  flags.bind(cmd, "dropout_dense", "--dropout-dense", "dropout rate after dense layers");
}

void print_metrics(const MetricsReport& report) {
  const auto per_class = report.per_class_accuracy();
  std::printf("%-8s %s\n", "class", "accuracy");
  for (size_t c = 0; c < per_class.size(); ++c)
    std::printf("%-8s %.4f\n", emotion_names()[c].c_str(), per_class[c]);
  std::printf("weighted accuracy: %.4f  (%llu/%llu)\n", report.weighted_accuracy(),
              static_cast<unsigned long long>(report.correct()),
              static_cast<unsigned long long>(report.total()));
}

template <class T>
int do_train(const RunConfig& rc) {
  const TrainArtifacts artifacts = run_train<T>(rc);
  std::printf("initial loss: %.4f\n", artifacts.initial_loss);
  print_metrics(artifacts.train_metrics);
  std::printf("checkpoint: %s\nloss log:   %s\nmetrics:    %s\n",
              artifacts.checkpoint_path.c_str(), artifacts.loss_csv_path.c_str(),
              artifacts.metrics_csv_path.c_str());
  return 0;
}

template <class T>
int do_evaluate(const RunConfig& rc) {
  print_metrics(run_evaluate<T>(rc));
  return 0;
}

template <class T>
int do_predict(const RunConfig& rc, const std::string& audio, const std::string& text) {
  const Prediction<T> p = run_predict<T>(rc, audio, text);
  std::printf("predicted: %s\n", emotion_names()[p.label].c_str());
  for (size_t c = 0; c < p.probs.size(); ++c)
    std::printf("  %-4s %.4f\n", emotion_names()[c].c_str(), static_cast<double>(p.probs[c]));
  return 0;
}

template <class T>
int do_ablate(const RunConfig& rc, const std::string& subsets) {
  const auto rows = run_ablate<T>(rc, subsets);
  std::printf("%-24s %-8s %s\n", "subset", "fold", "weighted_accuracy");
  for (const auto& row : rows) {
    const std::string fold = row.fold < 0 ? "pooled" : std::to_string(row.fold);
    std::printf("%-24s %-8s %.4f\n", row.subset.c_str(), fold.c_str(),
                row.report.weighted_accuracy());
  }
  return 0;
}

int do_gradcheck(uint64_t seed, size_t n_seeds, double tol) {
  const auto cases = run_gradcheck_suite(seed, n_seeds);
  std::printf("%-24s %-8s %-12s %s\n", "op", "seed", "max_rel_err", "status");
  bool ok = true;
  for (const auto& c : cases) {
    const bool pass = c.max_rel_err <= tol;
    ok = ok && pass;
    std::printf("%-24s %-8llu %-12.3e %s\n", c.op.c_str(),
                static_cast<unsigned long long>(c.seed), c.max_rel_err, pass ? "ok" : "FAIL");
  }
  std::printf("gradcheck %s (tolerance %.1e)\n", ok ? "passed" : "FAILED", tol);
  return ok ? 0 : 4;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"emofuse: multimodal speech emotion recognition on a from-scratch autodiff engine"};
  app.require_subcommand(1);

  // synth
  auto* synth_cmd = app.add_subcommand("synth", "generate a deterministic synthetic corpus");
  SynthSpec spec;
  std::string synth_out = "corpus";
  synth_cmd->add_option("--out", synth_out, "corpus output directory");
  synth_cmd->add_option("--size", spec.size, "sample count (>= 10)");
  synth_cmd->add_option("--seed", spec.seed, "generator seed");
  synth_cmd->add_option("--correlation", spec.correlation, "audio/label agreement in [0,1]");
  synth_cmd->add_option("--rate", spec.sample_rate, "sample rate in Hz");
  synth_cmd->add_option("--embed-dim", spec.embed_dim, "embedding width of the emitted file");

  // features
  auto* features_cmd = app.add_subcommand("features", "precompute the feature cache");
  FlagOverrides features_flags;
  add_common_flags(features_cmd, features_flags);

  // train
  auto* train_cmd = app.add_subcommand("train", "train a model on a manifest");
  FlagOverrides train_flags;
  add_common_flags(train_cmd, train_flags);

  // evaluate
  auto* eval_cmd = app.add_subcommand("evaluate", "evaluate a checkpoint on a manifest");
  FlagOverrides eval_flags;
  add_common_flags(eval_cmd, eval_flags);

  // ablate
  auto* ablate_cmd = app.add_subcommand("ablate", "cross-validated branch-subset grid");
  FlagOverrides ablate_flags;
  add_common_flags(ablate_cmd, ablate_flags);
  std::string subsets = "word,pos,mfsc,lld,all";
  ablate_cmd->add_option("--subsets", subsets,
                         "comma-separated subsets, branches joined by '+', e.g. word,word+mfsc,all");

  // predict
  auto* predict_cmd = app.add_subcommand("predict", "classify one audio/transcript pair");
  FlagOverrides predict_flags;
  add_common_flags(predict_cmd, predict_flags);
  std::string audio_path, text;
  predict_cmd->add_option("--audio", audio_path, "WAV file (PCM 16-bit mono)")->required();
  predict_cmd->add_option("--text", text, "transcript sentence")->required();

  // gradcheck
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  uint64_t gc_seed = 1;
  size_t gc_seeds = 5;
  double gc_tol = 1e-4;
  gradcheck_cmd->add_option("--seed", gc_seed, "base seed");
  gradcheck_cmd->add_option("--seeds", gc_seeds, "number of seeds");
  gradcheck_cmd->add_option("--tol", gc_tol, "max relative error tolerance");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth_cmd) {
      const SynthResult r = generate_synthetic_corpus(synth_out, spec);
      std::printf("manifest:   %s\nembeddings: %s\naudio:      %s\n", r.manifest_path.c_str(),
                  r.embeddings_path.c_str(), r.audio_dir.c_str());
      return 0;
    }
    if (*gradcheck_cmd) return do_gradcheck(gc_seed, gc_seeds, gc_tol);

    auto dispatch = [](const RunConfig& rc, auto&& f, auto&& d) {
      return rc.precision == "double" ? d(rc) : f(rc);
    };
    if (*features_cmd) {
      const RunConfig rc = features_flags.resolve();
      const size_t n = dispatch(
          rc, [](const RunConfig& c) { return run_features<float>(c); },
          [](const RunConfig& c) { return run_features<double>(c); });
      std::printf("cached features for %zu samples under %s\n", n, rc.cache_dir.c_str());
      return 0;
    }
    if (*train_cmd) {
      const RunConfig rc = train_flags.resolve();
      return rc.precision == "double" ? do_train<double>(rc) : do_train<float>(rc);
    }
    if (*eval_cmd) {
      const RunConfig rc = eval_flags.resolve();
      return rc.precision == "double" ? do_evaluate<double>(rc) : do_evaluate<float>(rc);
    }
    if (*ablate_cmd) {
      const RunConfig rc = ablate_flags.resolve();
      return rc.precision == "double" ? do_ablate<double>(rc, subsets)
                                      : do_ablate<float>(rc, subsets);
    }
    if (*predict_cmd) {
      const RunConfig rc = predict_flags.resolve();
      return rc.precision == "double" ? do_predict<double>(rc, audio_path, text)
                                      : do_predict<float>(rc, audio_path, text);
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error (config): %s\n", e.what());
    return 2;
  } catch (const ParseError& e) {
    std::fprintf(stderr, "error (parse): %s\n", e.what());
    return 3;
  } catch (const IoError& e) {
    std::fprintf(stderr, "error (io): %s\n", e.what());
    return 3;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
