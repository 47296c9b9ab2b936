// Copyright 2026 The emofuse Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dataset manifests, emotion label mapping, featurization and the on-disk
// feature cache.

#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "emofuse/common.hpp"
#include "emofuse/dsp.hpp"
#include "emofuse/lld.hpp"
#include "emofuse/model.hpp"
#include "emofuse/text.hpp"
#include "emofuse/wav.hpp"

namespace emofuse {

// ---------------------------------------------------------------------------
// Emotion labels
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& emotion_names() {
  static const std::vector<std::string> names = {"Ang", "Hap", "Sad", "Neu", "Fru"};
  return names;
}

// Maps raw annotation labels into the five-class set; excited merges into
// Hap. Labels outside the set are rejected at ingestion.
inline int merge_label(const std::string& raw) {
  static const std::map<std::string, int> mapping = {
      {"ang", 0}, {"anger", 0},      {"angry", 0},      {"hap", 1}, {"happy", 1},
      {"excited", 1}, {"sad", 2},    {"neu", 3},        {"neutral", 3},
      {"fru", 4}, {"frustration", 4}, {"frustrated", 4},
  };
  std::string key;
  for (char c : raw) key.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  auto it = mapping.find(key);
  if (it == mapping.end())
    throw ValueError("label '" + raw + "' is not one of the five emotion classes");
  return it->second;
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

// One dataset record: id, audio file, label, transcript, optional
// pre-computed POS tags and optional external LLD row reference.
struct ManifestEntry {
  std::string id;
  std::string audio_path;  // resolved against the manifest directory
  std::string label_raw;
  int label = -1;
  std::string transcript;
  std::optional<std::vector<std::string>> pos;
  std::optional<std::string> lld_ref;
};

// Tab-separated, one record per line:
//   id<TAB>audio_path<TAB>label<TAB>transcript[<TAB>pos=...][<TAB>lld=...]
inline std::vector<ManifestEntry> load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest '" + path + "'");
  const std::filesystem::path base = std::filesystem::path(path).parent_path();

  std::vector<ManifestEntry> entries;
  std::set<std::string> ids;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::string field;
    std::stringstream ss(line);
    while (std::getline(ss, field, '\t')) fields.push_back(field);
    if (fields.size() < 4)
      throw ParseError("manifest line " + std::to_string(line_no) + ": expected at least 4 fields, got " +
                       std::to_string(fields.size()));
    ManifestEntry e;
    e.id = fields[0];
    e.label_raw = fields[2];
    e.transcript = fields[3];
    try {
      e.label = merge_label(e.label_raw);
    } catch (const ValueError& err) {
      throw ParseError("manifest line " + std::to_string(line_no) + ": " + err.what());
    }
    if (!ids.insert(e.id).second)
      throw ParseError("manifest line " + std::to_string(line_no) + ": duplicate id '" + e.id + "'");
    const std::filesystem::path audio = std::filesystem::path(fields[1]).is_absolute()
                                            ? std::filesystem::path(fields[1])
                                            : base / fields[1];
    if (!std::filesystem::exists(audio))
      throw ParseError("manifest line " + std::to_string(line_no) + ": audio file '" +
                       audio.string() + "' does not exist");
    e.audio_path = audio.string();
    for (size_t i = 4; i < fields.size(); ++i) {
      if (fields[i].rfind("pos=", 0) == 0) {
        std::vector<std::string> tags;
        std::stringstream ps(fields[i].substr(4));
        std::string tag;
        while (ps >> tag) tags.push_back(tag);
        e.pos = std::move(tags);
      } else if (fields[i].rfind("lld=", 0) == 0) {
        e.lld_ref = fields[i].substr(4);
      } else {
        throw ParseError("manifest line " + std::to_string(line_no) + ": unknown field '" +
                         fields[i] + "'");
      }
    }
    entries.push_back(std::move(e));
  }
  if (entries.empty()) throw ParseError("manifest '" + path + "' has no records");
  return entries;
}

// ---------------------------------------------------------------------------
// Feature cache
// ---------------------------------------------------------------------------

namespace cache_detail {
constexpr uint32_t kMagic = 0x43444645;  // "EFDC"
}

inline void write_feature_record(const std::string& path, const std::vector<size_t>& dims,
                                 const std::vector<double>& data) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write feature record '" + path + "'");
  const uint32_t magic = cache_detail::kMagic, version = 1,
                 rank = static_cast<uint32_t>(dims.size());
  os.write(reinterpret_cast<const char*>(&magic), 4);
  os.write(reinterpret_cast<const char*>(&version), 4);
  os.write(reinterpret_cast<const char*>(&rank), 4);
  for (size_t d : dims) {
    const uint64_t v = d;
    os.write(reinterpret_cast<const char*>(&v), 8);
  }
  os.write(reinterpret_cast<const char*>(data.data()),
           static_cast<std::streamsize>(data.size() * sizeof(double)));
}

inline bool read_feature_record(const std::string& path, std::vector<size_t>& dims,
                                std::vector<double>& data) {
  std::ifstream is(path, std::ios::binary);
  if (!is) return false;
  uint32_t magic = 0, version = 0, rank = 0;
  is.read(reinterpret_cast<char*>(&magic), 4);
  is.read(reinterpret_cast<char*>(&version), 4);
  is.read(reinterpret_cast<char*>(&rank), 4);
  if (!is || magic != cache_detail::kMagic || version != 1 || rank > 8)
    throw ParseError("'" + path + "' is not a feature record");
  dims.assign(rank, 0);
  size_t total = 1;
  for (auto& d : dims) {
    uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    d = v;
    total *= d;
  }
  data.assign(total, 0.0);
  is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(total * 8));
  if (!is) throw ParseError("feature record '" + path + "' ended unexpectedly");
  return true;
}

inline std::string cache_key_path(const std::string& cache_dir, const std::string& id,
                                  uint64_t dsp_hash, const char* kind) {
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(dsp_hash));
  return (std::filesystem::path(cache_dir) / (id + "." + hex + "." + kind)).string();
}

// ---------------------------------------------------------------------------
// Featurization
// ---------------------------------------------------------------------------

// Featurized dataset with raw (unnormalized) LLD vectors; per-fold
// normalization happens in the training harness so that test folds never
// influence the statistics.
template <class T>
struct FeaturizedDataset {
  std::vector<SampleFeatures<T>> samples;  // lld left null here
  std::vector<std::vector<double>> raw_lld;
  std::vector<int> labels;
  std::vector<std::string> ids;
  size_t lld_dim = 0;
};

struct FeaturizeOptions {
  bool need_text = true;
  bool need_mfsc = true;
  bool need_lld = true;
  std::string cache_dir;                     // empty: no cache
  const ExternalLldTable* external_lld = nullptr;  // null: built-in extractor
};

template <class T>
std::vector<TensorPtr<T>> mfsc_to_tensors(const MfscMap& map) {
  std::vector<TensorPtr<T>> segs;
  segs.reserve(map.segments.size());
  for (const auto& seg : map.segments) {
    std::vector<T> values(seg.size());
    for (size_t i = 0; i < seg.size(); ++i) values[i] = static_cast<T>(seg[i]);
    segs.push_back(Tensor<T>::make({map.frames, map.bands, map.planes}, std::move(values)));
  }
  return segs;
}

template <class T>
FeaturizedDataset<T> featurize(const std::vector<ManifestEntry>& entries, const DspConfig& dsp,
                               const ModelConfig& model_cfg,
                               const EmbeddingTable<T>* word_table, const PosTagger& tagger,
                               const FeaturizeOptions& opts) {
  FeaturizedDataset<T> ds;
  ds.samples.reserve(entries.size());
  const uint64_t dsp_hash = dsp.hash();
  if (!opts.cache_dir.empty()) std::filesystem::create_directories(opts.cache_dir);

  for (const auto& e : entries) {
    SampleFeatures<T> s;
    s.label = e.label;

    if (opts.need_text) {
      if (opts.need_text && word_table == nullptr && model_cfg.has(BranchId::word))
        throw ConfigError("word branch active but no embedding table loaded");
      TokenSequence seq =
          make_token_sequence(e.transcript, tagger, e.pos ? &*e.pos : nullptr);
      if (word_table) s.word_ids = token_ids(seq.tokens, word_table->index);
      s.pos_ids.reserve(seq.pos_tags.size());
      for (const auto& tag : seq.pos_tags) {
        bool found = false;
        for (size_t i = 0; i < pos_tagset().size(); ++i) {
          if (pos_tagset()[i] == tag) {
            s.pos_ids.push_back(static_cast<long>(i));
            found = true;
            break;
          }
        }
        if (!found)
          throw ValueError("sample '" + e.id + "': POS tag '" + tag +
                           "' is not in the built-in tagset");
      }
    }

    std::optional<AudioClip> clip;
    auto load_clip = [&]() -> const AudioClip& {
      if (!clip) clip = read_wav(e.audio_path, dsp.sample_rate);
      return *clip;
    };

    if (opts.need_mfsc) {
      bool cached = false;
      if (!opts.cache_dir.empty()) {
        const std::string path = cache_key_path(opts.cache_dir, e.id, dsp_hash, "mfsc");
        std::vector<size_t> dims;
        std::vector<double> data;
        if (read_feature_record(path, dims, data)) {
          if (dims.size() != 4 || dims[1] != dsp.context || dims[2] != dsp.n_mels || dims[3] != 3)
            throw ParseError("cached MFSC record '" + path + "' has unexpected shape");
          MfscMap map;
          map.frames = dims[1];
          map.bands = dims[2];
          map.planes = 3;
          const size_t seg_len = dims[1] * dims[2] * 3;
          for (size_t i = 0; i < dims[0]; ++i)
            map.segments.emplace_back(data.begin() + i * seg_len, data.begin() + (i + 1) * seg_len);
          s.mfsc_segments = mfsc_to_tensors<T>(map);
          cached = true;
        }
      }
      if (!cached) {
        const MfscMap map = mfsc_map_from_clip(load_clip(), dsp);
        s.mfsc_segments = mfsc_to_tensors<T>(map);
        if (!opts.cache_dir.empty()) {
          std::vector<double> flat;
          flat.reserve(map.segments.size() * map.frames * map.bands * 3);
          for (const auto& seg : map.segments) flat.insert(flat.end(), seg.begin(), seg.end());
          write_feature_record(cache_key_path(opts.cache_dir, e.id, dsp_hash, "mfsc"),
                               {map.segments.size(), map.frames, map.bands, 3}, flat);
        }
      }
    }

    if (opts.need_lld) {
      std::vector<double> lld;
      if (opts.external_lld) {
        const std::string key = e.lld_ref ? *e.lld_ref : e.id;
        auto it = opts.external_lld->rows.find(key);
        if (it == opts.external_lld->rows.end())
          throw ValueError("sample '" + e.id + "': no row '" + key +
                           "' in the external feature table");
        lld = it->second;
      } else {
        bool cached = false;
        if (!opts.cache_dir.empty()) {
          const std::string path = cache_key_path(opts.cache_dir, e.id, dsp_hash, "lld");
          std::vector<size_t> dims;
          if (read_feature_record(path, dims, lld)) cached = true;
        }
        if (!cached) {
          lld = extract_lld(load_clip(), dsp);
          if (!opts.cache_dir.empty())
            write_feature_record(cache_key_path(opts.cache_dir, e.id, dsp_hash, "lld"),
                                 {lld.size()}, lld);
        }
      }
      if (ds.lld_dim == 0) ds.lld_dim = lld.size();
      if (lld.size() != ds.lld_dim)
        throw ShapeError("sample '" + e.id + "': LLD dimension " + std::to_string(lld.size()) +
                         " differs from " + std::to_string(ds.lld_dim));
      ds.raw_lld.push_back(std::move(lld));
    }

    ds.labels.push_back(e.label);
    ds.ids.push_back(e.id);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

// Builds normalized LLD leaf tensors for the given sample indices using
// statistics fitted elsewhere (on the training folds).
template <class T>
std::vector<SampleFeatures<T>> with_normalized_lld(const FeaturizedDataset<T>& ds,
                                                   const std::vector<size_t>& indices,
                                                   const MinMaxStats* stats) {
  std::vector<SampleFeatures<T>> out;
  out.reserve(indices.size());
  for (size_t idx : indices) {
    SampleFeatures<T> s = ds.samples[idx];
    if (stats && !ds.raw_lld.empty()) {
      const auto norm = apply_minmax(ds.raw_lld[idx], *stats);
      std::vector<T> values(norm.size());
      for (size_t j = 0; j < norm.size(); ++j) values[j] = static_cast<T>(norm[j]);
      const size_t dim = values.size();
      s.lld = Tensor<T>::make({dim}, std::move(values));
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace emofuse
