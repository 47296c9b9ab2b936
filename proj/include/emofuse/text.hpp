// Copyright 2026 The emofuse Authors
// SPDX-License-Identifier: Apache-2.0
//
// Transcript preprocessing: tokenization, part-of-speech tagging, embedding
// tables and padded sentence matrices.

#pragma once

#include <array>
#include <cctype>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "emofuse/common.hpp"
#include "emofuse/ops.hpp"
#include "emofuse/rng.hpp"
#include "emofuse/tensor.hpp"

namespace emofuse {

// Lowercases, splits on whitespace, strips every character outside
// [a-z0-9'] and drops tokens that end up empty.
inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) {
      tokens.push_back(current);
      current.clear();
    }
  };
  for (unsigned char ch : text) {
    if (std::isspace(ch)) {
      flush();
      continue;
    }
    const unsigned char lo = static_cast<unsigned char>(std::tolower(ch));
    if ((lo >= 'a' && lo <= 'z') || (lo >= '0' && lo <= '9') || lo == '\'')
      current.push_back(static_cast<char>(lo));
  }
  flush();
  return tokens;
}

// Coarse 12-tag set used by the built-in tagger and the POS embedding table.
inline const std::vector<std::string>& pos_tagset() {
  static const std::vector<std::string> tags = {"NOUN", "VERB", "ADJ", "ADV", "PRON", "DET",
                                                "ADP",  "NUM",  "CONJ", "PRT", "INTJ", "X"};
  return tags;
}

class PosTagger {
 public:
  virtual ~PosTagger() = default;
  virtual std::vector<std::string> tag(const std::vector<std::string>& tokens) const = 0;
};

// Lexicon plus suffix rules, defaulting to NOUN. Deliberately small; the
// manifest can carry externally computed tags instead.
class NaivePosTagger : public PosTagger {
 public:
  std::vector<std::string> tag(const std::vector<std::string>& tokens) const override {
    std::vector<std::string> out;
    out.reserve(tokens.size());
    for (const auto& tok : tokens) out.push_back(tag_one(tok));
    return out;
  }

  static std::string tag_one(const std::string& tok) {
    static const std::unordered_map<std::string, std::string> lexicon = {
        {"the", "DET"},   {"a", "DET"},     {"an", "DET"},    {"this", "DET"},
        {"that", "DET"},  {"these", "DET"}, {"those", "DET"},
        {"i", "PRON"},    {"you", "PRON"},  {"he", "PRON"},   {"she", "PRON"},
        {"it", "PRON"},   {"we", "PRON"},   {"they", "PRON"}, {"me", "PRON"},
        {"him", "PRON"},  {"her", "PRON"},  {"us", "PRON"},   {"them", "PRON"},
        {"my", "PRON"},   {"your", "PRON"}, {"his", "PRON"},  {"its", "PRON"},
        {"our", "PRON"},  {"their", "PRON"},
        {"i'm", "PRON"},  {"you're", "PRON"}, {"it's", "PRON"},
        {"in", "ADP"},    {"on", "ADP"},    {"at", "ADP"},    {"to", "ADP"},
        {"of", "ADP"},    {"with", "ADP"},  {"from", "ADP"},  {"by", "ADP"},
        {"for", "ADP"},   {"about", "ADP"}, {"into", "ADP"},  {"over", "ADP"},
        {"and", "CONJ"},  {"or", "CONJ"},   {"but", "CONJ"},  {"so", "CONJ"},
        {"because", "CONJ"},
        {"not", "PRT"},   {"n't", "PRT"},   {"up", "PRT"},    {"off", "PRT"},
        {"is", "VERB"},   {"am", "VERB"},   {"are", "VERB"},  {"was", "VERB"},
        {"were", "VERB"}, {"be", "VERB"},   {"been", "VERB"}, {"being", "VERB"},
        {"do", "VERB"},   {"does", "VERB"}, {"did", "VERB"},  {"done", "VERB"},
        {"have", "VERB"}, {"has", "VERB"},  {"had", "VERB"},  {"can", "VERB"},
        {"could", "VERB"},{"will", "VERB"}, {"would", "VERB"},{"should", "VERB"},
        {"go", "VERB"},   {"went", "VERB"}, {"feel", "VERB"}, {"felt", "VERB"},
        {"want", "VERB"}, {"know", "VERB"}, {"think", "VERB"},{"say", "VERB"},
        {"said", "VERB"}, {"get", "VERB"},  {"got", "VERB"},  {"make", "VERB"},
        {"one", "NUM"},   {"two", "NUM"},   {"three", "NUM"}, {"four", "NUM"},
        {"five", "NUM"},  {"six", "NUM"},   {"seven", "NUM"}, {"eight", "NUM"},
        {"nine", "NUM"},  {"ten", "NUM"},   {"zero", "NUM"},
        {"oh", "INTJ"},   {"hey", "INTJ"},  {"wow", "INTJ"},  {"yeah", "INTJ"},
        {"yes", "INTJ"},  {"hmm", "INTJ"},  {"ugh", "INTJ"},
        {"good", "ADJ"},  {"bad", "ADJ"},   {"happy", "ADJ"}, {"sad", "ADJ"},
        {"angry", "ADJ"}, {"fine", "ADJ"},  {"great", "ADJ"},
        {"very", "ADV"},  {"really", "ADV"},{"quite", "ADV"}, {"never", "ADV"},
        {"always", "ADV"},{"now", "ADV"},   {"here", "ADV"},  {"there", "ADV"},
    };
    auto it = lexicon.find(tok);
    if (it != lexicon.end()) return it->second;

    auto ends_with = [&tok](const char* suffix) {
      const size_t n = std::strlen(suffix);
      return tok.size() > n && tok.compare(tok.size() - n, n, suffix) == 0;
    };
    bool all_digits = !tok.empty();
    bool any_alnum = false;
    for (char c : tok) {
      if (!(c >= '0' && c <= '9')) all_digits = false;
      if ((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9')) any_alnum = true;
    }
    if (all_digits) return "NUM";
    if (!any_alnum) return "X";
    if (ends_with("ly")) return "ADV";
    if (ends_with("ing") || ends_with("ed")) return "VERB";
    if (ends_with("ous") || ends_with("ful") || ends_with("ive") || ends_with("able"))
      return "ADJ";
    return "NOUN";
  }
};

struct TokenSequence {
  std::vector<std::string> tokens;
  std::vector<std::string> pos_tags;
};

// Builds the aligned token/tag sequence; supplied tags bypass the tagger and
// must match the token count.
inline TokenSequence make_token_sequence(const std::string& text, const PosTagger& tagger,
                                         const std::vector<std::string>* supplied_tags = nullptr) {
  TokenSequence seq;
  seq.tokens = tokenize(text);
  if (supplied_tags) {
    if (supplied_tags->size() != seq.tokens.size())
      throw ValueError("supplied POS tags count " + std::to_string(supplied_tags->size()) +
                       " does not match token count " + std::to_string(seq.tokens.size()));
    seq.pos_tags = *supplied_tags;
  } else {
    seq.pos_tags = tagger.tag(seq.tokens);
  }
  return seq;
}

// ---------------------------------------------------------------------------
// Embedding tables
// ---------------------------------------------------------------------------

template <class T>
struct EmbeddingTable {
  TensorPtr<T> weights;  // [V x E]
  std::unordered_map<std::string, size_t> index;
  size_t dim = 0;
  bool trainable = false;

  // -1 signals out-of-vocabulary; such tokens embed to the zero vector.
  long token_id(const std::string& token) const {
    auto it = index.find(token);
    return it == index.end() ? -1 : static_cast<long>(it->second);
  }

  std::vector<T> lookup(const std::string& token) const {
    const long id = token_id(token);
    if (id < 0) return std::vector<T>(dim, T(0));
    auto v = weights->values();
    return std::vector<T>(v.begin() + static_cast<size_t>(id) * dim,
                          v.begin() + (static_cast<size_t>(id) + 1) * dim);
  }
};

// Loads a textual word-vector file: one token followed by E scalars per
// line, whitespace separated. An optional first line "V E" is accepted and
// validated. Word vectors load frozen by default.
template <class T>
EmbeddingTable<T> load_embeddings(const std::string& path, size_t expected_dim = 0,
                                  bool trainable = false) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open embedding file '" + path + "'");
  std::vector<std::string> tokens;
  std::vector<std::vector<T>> vectors;
  size_t dim = expected_dim;
  size_t declared_count = 0;
  std::string line;
  size_t line_no = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::vector<std::string> fields;
    std::string f;
    while (ss >> f) fields.push_back(f);
    if (first) {
      first = false;
      if (fields.size() == 2) {
        // Header "V E".
        try {
          declared_count = std::stoul(fields[0]);
          const size_t e = std::stoul(fields[1]);
          if (dim != 0 && e != dim)
            throw ParseError("embedding file declares dimension " + std::to_string(e) +
                             " but " + std::to_string(dim) + " was expected");
          dim = e;
          continue;
        } catch (const ParseError&) {
          throw;
        } catch (const std::exception&) {
          // Not a header; fall through and parse as a data line.
        }
      }
    }
    if (fields.empty()) continue;
    if (dim == 0) {
      if (fields.size() < 2)
        throw ParseError("embedding file line " + std::to_string(line_no) + ": no vector values");
      dim = fields.size() - 1;
    }
    if (fields.size() != dim + 1)
      throw ParseError("embedding file line " + std::to_string(line_no) + ": expected " +
                       std::to_string(dim + 1) + " fields, got " + std::to_string(fields.size()));
    std::vector<T> vec(dim);
    for (size_t j = 0; j < dim; ++j) {
      try {
        vec[j] = static_cast<T>(std::stod(fields[j + 1]));
      } catch (const std::exception&) {
        throw ParseError("embedding file line " + std::to_string(line_no) + ": bad number '" +
                         fields[j + 1] + "'");
      }
    }
    tokens.push_back(fields[0]);
    vectors.push_back(std::move(vec));
  }
  if (tokens.empty()) throw ParseError("embedding file '" + path + "' has no vectors");
  if (declared_count != 0 && declared_count != tokens.size())
    throw ParseError("embedding file declares " + std::to_string(declared_count) +
                     " vectors but contains " + std::to_string(tokens.size()));

  EmbeddingTable<T> table;
  table.dim = dim;
  table.trainable = trainable;
  std::vector<T> flat(tokens.size() * dim);
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (table.index.count(tokens[i]))
      throw ParseError("embedding file: duplicate token '" + tokens[i] + "'");
    table.index[tokens[i]] = i;
    std::copy(vectors[i].begin(), vectors[i].end(), flat.begin() + i * dim);
  }
  table.weights = Tensor<T>::make({tokens.size(), dim}, std::move(flat), trainable);
  return table;
}

// Trainable POS embedding table, Xavier-uniform initialized and learned
// end-to-end with the rest of the model.
template <class T>
EmbeddingTable<T> pos_embedding_table(const std::vector<std::string>& tagset, size_t dim,
                                      RngStream rng) {
  if (tagset.empty()) throw ValueError("pos_embedding_table: empty tagset");
  EmbeddingTable<T> table;
  table.dim = dim;
  table.trainable = true;
  const T limit = static_cast<T>(std::sqrt(6.0 / static_cast<double>(tagset.size() + dim)));
  table.weights =
      Tensor<T>::rand_uniform({tagset.size(), dim}, rng, -limit, limit, /*requires_grad=*/true);
  for (size_t i = 0; i < tagset.size(); ++i) {
    if (table.index.count(tagset[i]))
      throw ValueError("pos_embedding_table: duplicate tag '" + tagset[i] + "'");
    table.index[tagset[i]] = i;
  }
  return table;
}

// ---------------------------------------------------------------------------
// Sentence matrices
// ---------------------------------------------------------------------------

template <class T>
struct SentenceMatrix {
  TensorPtr<T> rows;  // [max_len x E]
  size_t valid_len = 0;
};

inline std::vector<long> token_ids(const std::vector<std::string>& tokens,
                                   const std::unordered_map<std::string, size_t>& index) {
  std::vector<long> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) {
    auto it = index.find(t);
    ids.push_back(it == index.end() ? -1 : static_cast<long>(it->second));
  }
  return ids;
}

// Builds the fixed [max_len x E] matrix: embedding rows for the first
// max_len tokens (zero rows for out-of-vocabulary ids), zero rows beyond the
// sentence length. Gradients flow into the table when it is trainable.
template <class T>
SentenceMatrix<T> embed_and_pad(Tape<T>& tape, const std::vector<long>& ids,
                                const EmbeddingTable<T>& table, size_t max_len = 40) {
  const size_t len = std::min(ids.size(), max_len);
  auto zero_row = Tensor<T>::make({table.dim});
  std::vector<TensorPtr<T>> rows;
  rows.reserve(max_len);
  for (size_t i = 0; i < len; ++i) {
    if (ids[i] < 0)
      rows.push_back(zero_row);
    else
      rows.push_back(embedding_lookup(tape, table.weights, static_cast<size_t>(ids[i])));
  }
  for (size_t i = len; i < max_len; ++i) rows.push_back(zero_row);
  SentenceMatrix<T> out;
  out.rows = stack_rows(tape, rows);
  out.valid_len = len;
  return out;
}

template <class T>
SentenceMatrix<T> embed_and_pad(Tape<T>& tape, const std::vector<std::string>& tokens,
                                const EmbeddingTable<T>& table, size_t max_len = 40) {
  return embed_and_pad(tape, token_ids(tokens, table.index), table, max_len);
}

}  // namespace emofuse
