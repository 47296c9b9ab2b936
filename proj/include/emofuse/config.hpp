// Copyright 2026 The emofuse Authors
// SPDX-License-Identifier: Apache-2.0
//
// Flat key = value run configuration with typed validation. Flags override
// file values; every rejection names the offending key.

#pragma once

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "emofuse/common.hpp"
#include "emofuse/dsp.hpp"
#include "emofuse/model.hpp"
#include "emofuse/train.hpp"

namespace emofuse {

struct RunConfig {
  // Paths
  std::string manifest;
  std::string out_dir = "out";
  std::string cache_dir;
  std::string embeddings;
  std::string external_lld;
  std::string checkpoint;

  DspConfig dsp;
  ModelConfig model;

  // Training
  std::string regime = "together";
  size_t epochs = 50;
  size_t batch_size = 32;
  double learning_rate = 0.01;
  uint64_t seed = 1;
  std::string precision = "float";
  bool check_finite = false;
  bool finetune_embeddings = false;

  TrainingPlan plan() const {
    TrainingPlan p;
    p.regime = parse_regime(regime);
    p.epochs = epochs;
    p.batch_size = batch_size;
    p.learning_rate = learning_rate;
    p.seed = seed;
    p.check_finite = check_finite;
    return p;
  }

  void validate() const {
    dsp.validate();
    model.validate();
    parse_regime(regime);
    if (precision != "float" && precision != "double")
      throw ConfigError("precision: expected 'float' or 'double', got '" + precision + "'");
    if (epochs < 1) throw ConfigError("epochs: must be at least 1");
    if (batch_size < 2) throw ConfigError("batch_size: must be at least 2");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate: must be positive");
    if (dsp.n_mels != model.mel_bands)
      throw ConfigError("n_mels: DSP mel bands " + std::to_string(dsp.n_mels) +
                        " do not match the model's " + std::to_string(model.mel_bands));
  }
};

namespace config_detail {

inline size_t to_size(const std::string& key, const std::string& v) {
  try {
    const long long x = std::stoll(v);
    if (x < 0) throw std::out_of_range("negative");
    return static_cast<size_t>(x);
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
}

inline uint64_t to_u64(const std::string& key, const std::string& v) {
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected an unsigned integer, got '" + v + "'");
  }
}

inline double to_double(const std::string& key, const std::string& v) {
  try {
    return std::stod(v);
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

}  // namespace config_detail

// Applies a single key; unknown keys are rejected by name.
inline void apply_config_value(RunConfig& rc, const std::string& key, const std::string& value) {
  using namespace config_detail;
  if (key == "manifest") rc.manifest = value;
  else if (key == "out_dir") rc.out_dir = value;
  else if (key == "cache_dir") rc.cache_dir = value;
  else if (key == "embeddings") rc.embeddings = value;
  else if (key == "external_lld") rc.external_lld = value;
  else if (key == "checkpoint") rc.checkpoint = value;
  else if (key == "sample_rate") rc.dsp.sample_rate = to_size(key, value);
  else if (key == "frame_ms") rc.dsp.frame_ms = to_double(key, value);
  else if (key == "hop_ms") rc.dsp.hop_ms = to_double(key, value);
  else if (key == "n_fft") rc.dsp.n_fft = to_size(key, value);
  else if (key == "n_mels") { rc.dsp.n_mels = to_size(key, value); rc.model.mel_bands = rc.dsp.n_mels; }
  else if (key == "branches") rc.model.branches = parse_branches(value);
  else if (key == "scale") rc.model.scale = to_double(key, value);
  else if (key == "dropout_conv") rc.model.dropout_conv = to_double(key, value);
  else if (key == "dropout_dense") rc.model.dropout_dense = to_double(key, value);
  else if (key == "max_tokens") rc.model.max_tokens = to_size(key, value);
  else if (key == "word_dim") rc.model.word_dim = to_size(key, value);
  else if (key == "pos_dim") rc.model.pos_dim = to_size(key, value);
  else if (key == "regime") rc.regime = value;
  else if (key == "epochs") rc.epochs = to_size(key, value);
  else if (key == "batch_size") rc.batch_size = to_size(key, value);
  else if (key == "learning_rate") rc.learning_rate = to_double(key, value);
  else if (key == "seed") rc.seed = to_u64(key, value);
  else if (key == "precision") rc.precision = value;
  else if (key == "check_finite") rc.check_finite = to_bool(key, value);
  else if (key == "finetune_embeddings") rc.finetune_embeddings = to_bool(key, value);
  else throw ConfigError("unknown config key '" + key + "'");
}

// Reads "key = value" lines; '#' starts a comment, blank lines are ignored.
inline void apply_config_file(RunConfig& rc, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto strip = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      const auto e = s.find_last_not_of(" \t\r");
      return s.substr(b, e - b + 1);
    };
    const std::string stripped = strip(line);
    if (stripped.empty()) continue;
    const size_t eq = stripped.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = strip(stripped.substr(0, eq));
    const std::string value = strip(stripped.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    apply_config_value(rc, key, value);
  }
}

// EMOFUSE_OUT overrides the output directory.
inline void apply_env_overrides(RunConfig& rc) {
  if (const char* out = std::getenv("EMOFUSE_OUT"); out && *out) rc.out_dir = out;
}

}  // namespace emofuse
