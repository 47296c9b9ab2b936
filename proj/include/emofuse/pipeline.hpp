// Copyright 2026 The emofuse Authors
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end runners behind the CLI subcommands. All artifacts land under
// RunConfig::out_dir.

#pragma once

#include <filesystem>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "emofuse/config.hpp"
#include "emofuse/dataset.hpp"
#include "emofuse/model.hpp"
#include "emofuse/synth.hpp"
#include "emofuse/train.hpp"

namespace emofuse {

template <class T>
void set_lld_norm(Model<T>& m, const MinMaxStats& stats) {
  if (!m.lld_norm_lo) return;
  if (stats.dim() != m.lld_norm_lo->size())
    throw ShapeError("normalization stats dimension " + std::to_string(stats.dim()) +
                     " does not match model lld_dim " + std::to_string(m.lld_norm_lo->size()));
  for (size_t j = 0; j < stats.dim(); ++j) {
    m.lld_norm_lo->values()[j] = static_cast<T>(stats.lo[j]);
    m.lld_norm_hi->values()[j] = static_cast<T>(stats.hi[j]);
  }
}

template <class T>
MinMaxStats get_lld_norm(const Model<T>& m) {
  MinMaxStats stats;
  if (!m.lld_norm_lo) return stats;
  stats.lo.assign(m.lld_norm_lo->values().begin(), m.lld_norm_lo->values().end());
  stats.hi.assign(m.lld_norm_hi->values().begin(), m.lld_norm_hi->values().end());
  return stats;
}

namespace pipeline_detail {

template <class T>
struct LoadedData {
  std::vector<ManifestEntry> entries;
  std::shared_ptr<EmbeddingTable<T>> word_table;
  ExternalLldTable external;
  bool has_external = false;
  FeaturizedDataset<T> ds;
  ModelConfig cfg;  // with lld_dim resolved from the data
};

template <class T>
LoadedData<T> load_and_featurize(const RunConfig& rc) {
  LoadedData<T> out;
  out.cfg = rc.model;
  out.entries = load_manifest(rc.manifest);
  out.cfg.finetune_embeddings = rc.finetune_embeddings;
  if (out.cfg.has(BranchId::word)) {
    if (rc.embeddings.empty())
      throw ConfigError("embeddings: required while the word branch is active");
    out.word_table = std::make_shared<EmbeddingTable<T>>(
        load_embeddings<T>(rc.embeddings, 0, rc.finetune_embeddings));
    out.cfg.word_dim = out.word_table->dim;
  }
  FeaturizeOptions opts;
  opts.need_text = out.cfg.has(BranchId::word) || out.cfg.has(BranchId::pos);
  opts.need_mfsc = out.cfg.has(BranchId::mfsc);
  opts.need_lld = out.cfg.has(BranchId::lld);
  opts.cache_dir = rc.cache_dir;
  if (opts.need_lld && !rc.external_lld.empty()) {
    out.external = ingest_external_lld(rc.external_lld);
    out.has_external = true;
    opts.external_lld = &out.external;
  }
  NaivePosTagger tagger;
  out.ds = featurize<T>(out.entries, rc.dsp, out.cfg, out.word_table.get(), tagger, opts);
  if (opts.need_lld) out.cfg.lld_dim = out.ds.lld_dim;
  return out;
}

}  // namespace pipeline_detail

struct TrainArtifacts {
  std::string checkpoint_path;
  std::string loss_csv_path;
  std::string metrics_csv_path;
  double initial_loss = 0.0;
  uint64_t branch_checksum_after_stage1 = 0;
  uint64_t branch_checksum_after_stage2 = 0;
  MetricsReport train_metrics;
};

// Trains one model on the full manifest (normalization statistics fitted on
// exactly the data being trained on), then writes the loss log, train-split
// metrics and a checkpoint.
template <class T>
TrainArtifacts run_train(const RunConfig& rc) {
  rc.validate();
  auto data = pipeline_detail::load_and_featurize<T>(rc);
  std::filesystem::create_directories(rc.out_dir);

  std::vector<size_t> all(data.ds.samples.size());
  std::iota(all.begin(), all.end(), 0);
  MinMaxStats stats;
  const MinMaxStats* stats_ptr = nullptr;
  if (data.cfg.has(BranchId::lld)) {
    stats = fit_minmax(data.ds.raw_lld);
    stats_ptr = &stats;
  }
  auto samples = with_normalized_lld(data.ds, all, stats_ptr);

  auto model = build_model<T>(data.cfg, rc.seed, data.word_table);
  if (stats_ptr) set_lld_norm(model, stats);
  const TrainOutput result = train_model(model, samples, rc.plan());

  TrainArtifacts artifacts;
  artifacts.initial_loss = result.initial_loss;
  artifacts.branch_checksum_after_stage1 = result.branch_checksum_after_stage1;
  artifacts.branch_checksum_after_stage2 = result.branch_checksum_after_stage2;
  artifacts.train_metrics = evaluate(model, samples);

  const std::filesystem::path out(rc.out_dir);
  artifacts.checkpoint_path = (out / "model.ckpt").string();
  artifacts.loss_csv_path = (out / "loss.csv").string();
  artifacts.metrics_csv_path = (out / "metrics.csv").string();
  save_checkpoint(artifacts.checkpoint_path, model);
  write_loss_csv(artifacts.loss_csv_path, result.loss_log);
  write_results_csv(artifacts.metrics_csv_path,
                    {AblationRow(branches_str(data.cfg.branches), -1, artifacts.train_metrics)});
  return artifacts;
}

// Evaluates a checkpoint against a manifest; normalization statistics come
// from the checkpoint, never from the evaluated data.
template <class T>
MetricsReport run_evaluate(const RunConfig& rc) {
  if (rc.checkpoint.empty()) throw ConfigError("checkpoint: required for evaluation");
  rc.dsp.validate();
  std::shared_ptr<EmbeddingTable<T>> table;
  {
    // Peek at the stored config to know whether embeddings are needed.
    std::ifstream is(rc.checkpoint, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint '" + rc.checkpoint + "'");
    is.seekg(16);  // magic, version, seed
    const ModelConfig stored = read_model_config(is);
    if (stored.has(BranchId::word)) {
      if (rc.embeddings.empty())
        throw ConfigError("embeddings: required to evaluate a model with a word branch");
      table = std::make_shared<EmbeddingTable<T>>(
          load_embeddings<T>(rc.embeddings, 0, stored.finetune_embeddings));
    }
  }
  Model<T> model = load_checkpoint<T>(rc.checkpoint, table);

  auto entries = load_manifest(rc.manifest);
  FeaturizeOptions opts;
  opts.need_text = model.cfg.has(BranchId::word) || model.cfg.has(BranchId::pos);
  opts.need_mfsc = model.cfg.has(BranchId::mfsc);
  opts.need_lld = model.cfg.has(BranchId::lld);
  opts.cache_dir = rc.cache_dir;
  ExternalLldTable external;
  if (opts.need_lld && !rc.external_lld.empty()) {
    external = ingest_external_lld(rc.external_lld);
    opts.external_lld = &external;
  }
  NaivePosTagger tagger;
  auto ds = featurize<T>(entries, rc.dsp, model.cfg, table.get(), tagger, opts);
  std::vector<size_t> all(ds.samples.size());
  std::iota(all.begin(), all.end(), 0);
  const MinMaxStats stats = get_lld_norm(model);
  auto samples =
      with_normalized_lld(ds, all, model.cfg.has(BranchId::lld) ? &stats : nullptr);

  MetricsReport report = evaluate(model, samples);
  if (!rc.out_dir.empty()) {
    std::filesystem::create_directories(rc.out_dir);
    write_results_csv((std::filesystem::path(rc.out_dir) / "metrics.csv").string(),
                      {AblationRow(branches_str(model.cfg.branches), -1, report)});
  }
  return report;
}

// Classifies one (audio, transcript) pair with a trained checkpoint.
template <class T>
Prediction<T> run_predict(const RunConfig& rc, const std::string& audio_path,
                          const std::string& transcript) {
  if (rc.checkpoint.empty()) throw ConfigError("checkpoint: required for prediction");
  rc.dsp.validate();
  std::shared_ptr<EmbeddingTable<T>> table;
  {
    std::ifstream is(rc.checkpoint, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint '" + rc.checkpoint + "'");
    is.seekg(16);
    const ModelConfig stored = read_model_config(is);
    if (stored.has(BranchId::word)) {
      if (rc.embeddings.empty())
        throw ConfigError("embeddings: required to predict with a word branch");
      table = std::make_shared<EmbeddingTable<T>>(
          load_embeddings<T>(rc.embeddings, 0, stored.finetune_embeddings));
    }
  }
  Model<T> model = load_checkpoint<T>(rc.checkpoint, table);

  SampleFeatures<T> s;
  if (model.cfg.has(BranchId::word) || model.cfg.has(BranchId::pos)) {
    NaivePosTagger tagger;
    const TokenSequence seq = make_token_sequence(transcript, tagger);
    if (table) s.word_ids = token_ids(seq.tokens, table->index);
    for (const auto& tag : seq.pos_tags)
      for (size_t i = 0; i < pos_tagset().size(); ++i)
        if (pos_tagset()[i] == tag) {
          s.pos_ids.push_back(static_cast<long>(i));
          break;
        }
  }
  if (model.cfg.has(BranchId::mfsc) || model.cfg.has(BranchId::lld)) {
    const AudioClip clip = read_wav(audio_path, rc.dsp.sample_rate);
    if (model.cfg.has(BranchId::mfsc))
      s.mfsc_segments = mfsc_to_tensors<T>(mfsc_map_from_clip(clip, rc.dsp));
    if (model.cfg.has(BranchId::lld)) {
      std::vector<double> raw = extract_lld(clip, rc.dsp);
      if (raw.size() != model.cfg.lld_dim)
        throw ShapeError("built-in LLD dimension " + std::to_string(raw.size()) +
                         " does not match the checkpoint's " + std::to_string(model.cfg.lld_dim));
      const MinMaxStats stats = get_lld_norm(model);
      const auto norm = apply_minmax(raw, stats);
      std::vector<T> values(norm.begin(), norm.end());
      const size_t dim = values.size();
      s.lld = Tensor<T>::make({dim}, std::move(values));
    }
  }
  return predict(model, s);
}

// Table-style ablation over branch subsets with shared folds and seeds.
template <class T>
std::vector<AblationRow> run_ablate(const RunConfig& rc, const std::string& subsets_spec) {
  rc.validate();
  auto data = pipeline_detail::load_and_featurize<T>(rc);
  std::filesystem::create_directories(rc.out_dir);

  std::vector<std::vector<BranchId>> subsets;
  std::string token;
  for (char c : subsets_spec + ",") {
    if (c == ',') {
      if (!token.empty()) subsets.push_back(parse_branches(token));
      token.clear();
    } else {
      token.push_back(c);
    }
  }
  if (subsets.empty()) throw ConfigError("ablate: no subsets given");

  const FoldSplit folds = make_folds(data.ds.samples.size(), rc.seed, &data.ds.labels);
  auto rows = run_ablation_grid(subsets, data.cfg, rc.plan(), data.ds, data.word_table, folds,
                                rc.out_dir);
  write_results_csv((std::filesystem::path(rc.out_dir) / "ablation.csv").string(), rows);
  return rows;
}

// Precomputes the feature cache for a manifest.
template <class T>
size_t run_features(const RunConfig& rc) {
  if (rc.cache_dir.empty()) throw ConfigError("cache_dir: required for feature precomputation");
  auto data = pipeline_detail::load_and_featurize<T>(rc);
  return data.ds.samples.size();
}

}  // namespace emofuse
