#include "ovseg/head.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "ovseg/rng.hpp"

namespace ovseg {
namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::vector<double> unit(std::vector<double> v, const std::string& what) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (!(n > 0.0) || !std::isfinite(n)) throw ContractError("embedding for '" + what + "' has zero or non-finite norm");
  for (double& x : v) x /= n;
  return v;
}

}  // namespace

void BiasConfig::validate() const {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must be within [0, 1]");
}

ClassVocabulary::ClassVocabulary(std::vector<ClassGroup> groups, Tensor embeddings)
    : groups_(std::move(groups)), embeddings_(std::move(embeddings)) {
  if (groups_.empty()) throw ConfigError("vocabulary has no classes");
  std::set<std::string> names;
  for (std::size_t g = 0; g < groups_.size(); ++g) {
    if (groups_[g].synonyms.empty()) throw ConfigError("class '" + groups_[g].name + "' has no synonyms");
    if (!names.insert(groups_[g].name).second) throw ConfigError("duplicate class name '" + groups_[g].name + "'");
    for (std::size_t s = 0; s < groups_[g].synonyms.size(); ++s) owner_.push_back(g);
  }
  if (groups_.size() > 255) throw ConfigError("at most 255 classes are supported");
  if (embeddings_.rank() != 2 || embeddings_.dim(0) != owner_.size()) {
    throw DimensionError("vocabulary embeddings must be [" + std::to_string(owner_.size()) + " x c], got " +
                         shape_str(embeddings_.shape()));
  }
  for (std::size_t r = 0; r < embeddings_.dim(0); ++r) {
    double n = 0.0;
    for (std::size_t j = 0; j < embeddings_.dim(1); ++j) n += embeddings_.at(r, j) * embeddings_.at(r, j);
    if (std::abs(std::sqrt(n) - 1.0) > 1e-9) throw ContractError("embedding row " + std::to_string(r) + " is not unit norm");
  }
}

std::vector<ClassGroup> ClassVocabulary::parse_groups(std::string_view text) {
  std::vector<ClassGroup> groups;
  std::size_t offset = 0;
  while (offset <= text.size()) {
    auto end = text.find('\n', offset);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(offset, end - offset);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (!line.empty()) {
      ClassGroup group;
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) {
        group.name = std::string(line);
        group.synonyms.push_back(group.name);
      } else {
        group.name = std::string(trim(line.substr(0, eq)));
        if (group.name.empty()) throw ParseError("vocabulary: empty class name", offset);
        std::string_view rest = line.substr(eq + 1);
        while (true) {
          const auto bar = rest.find('|');
          const auto syn = trim(rest.substr(0, bar));
          if (syn.empty()) throw ParseError("vocabulary: empty synonym for '" + group.name + "'", offset);
          group.synonyms.emplace_back(syn);
          if (bar == std::string_view::npos) break;
          rest = rest.substr(bar + 1);
        }
      }
      for (const auto& g : groups) {
        if (g.name == group.name) throw ParseError("vocabulary: duplicate class '" + group.name + "'", offset);
      }
      groups.push_back(std::move(group));
    }
    offset = end + 1;
  }
  if (groups.empty()) throw ParseError("vocabulary: no classes", text.size());
  return groups;
}

ClassVocabulary ClassVocabulary::from_ovw1(std::vector<ClassGroup> groups, const ParamSet& embeddings) {
  std::vector<double> rows;
  std::size_t dim = 0;
  for (const auto& g : groups) {
    for (const auto& s : g.synonyms) {
      if (!embeddings.contains(s)) throw InputError("no embedding for synonym '" + s + "'");
      const Tensor& e = embeddings.get(s);
      if (dim == 0) dim = e.numel();
      if (e.numel() != dim || dim == 0) throw DimensionError("embedding for '" + s + "' has the wrong size");
      // stored as f32; renormalize in double
      const auto u = unit(std::vector<double>(e.data().begin(), e.data().end()), s);
      rows.insert(rows.end(), u.begin(), u.end());
    }
  }
  const std::size_t n = dim == 0 ? 0 : rows.size() / dim;
  return ClassVocabulary(std::move(groups), Tensor({n, dim}, std::move(rows)));
}

ClassVocabulary ClassVocabulary::synthesize(std::vector<ClassGroup> groups, std::size_t dim, std::uint64_t seed) {
  std::vector<double> rows;
  for (const auto& g : groups)
    for (const auto& s : g.synonyms) {
      const Tensor e = synthesize_text_embedding(s, dim, seed);
      rows.insert(rows.end(), e.data().begin(), e.data().end());
    }
  const std::size_t n = rows.size() / std::max<std::size_t>(dim, 1);
  return ClassVocabulary(std::move(groups), Tensor({n, dim}, std::move(rows)));
}

Tensor synthesize_text_embedding(std::string_view text, std::size_t dim, std::uint64_t seed) {
  if (dim == 0) throw ConfigError("embedding dimension must be positive");
  Rng rng(Rng::derive(seed, text));
  std::vector<double> v(dim);
  for (double& x : v) x = rng.normal();
  return Tensor({dim}, unit(std::move(v), std::string(text)));
}

Tensor alleviate_global_bias(const Tensor& patches, const Tensor& cls, double lambda) {
  if (patches.rank() != 2) throw DimensionError("alleviate_global_bias: patches must be [N x c]");
  const Tensor row = cls.rank() == 2 ? ops::reshape(cls, {cls.numel()}) : cls;
  if (row.numel() != patches.dim(1)) throw DimensionError("alleviate_global_bias: cls width mismatch");
  return ops::add_row(patches, ops::scale(row, -lambda));
}

Tensor alleviate_global_bias(const TokenSequence& out, const BiasConfig& config) {
  config.validate();
  if (out.tokens.rank() != 2 || out.tokens.dim(0) < 2) {
    throw DimensionError("alleviate_global_bias: need a CLS row and at least one patch row");
  }
  return alleviate_global_bias(out.patches(), out.cls(), config.lambda);
}

Tensor similarity_logits(const Tensor& patches, const ClassVocabulary& vocab) {
  if (patches.rank() != 2 || patches.dim(1) != vocab.dim()) {
    throw DimensionError("similarity_logits: patches must be [N x " + std::to_string(vocab.dim()) + "], got " +
                         shape_str(patches.shape()));
  }
  return ops::matmul(ops::normalize_rows(patches), ops::transpose(vocab.embeddings()));
}

Tensor group_reduce(const Tensor& logits, const ClassVocabulary& vocab) {
  if (logits.rank() != 2 || logits.dim(1) != vocab.num_synonyms()) {
    throw DimensionError("group_reduce: logits must have one column per synonym");
  }
  const std::size_t n = logits.dim(0), s = logits.dim(1), g = vocab.num_groups();
  std::vector<double> out(n * g, -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < s; ++j) {
      double& o = out[i * g + vocab.group_of(j)];
      o = std::max(o, logits.at(i, j));
    }
  return Tensor({n, g}, std::move(out));
}

SegmentationMask segment_argmax(const Tensor& scores, std::size_t h, std::size_t w) {
  if (scores.rank() != 2 || scores.dim(0) != h * w) throw DimensionError("segment_argmax: scores must be [h*w x G]");
  if (scores.dim(1) == 0 || scores.dim(1) > 255) throw DimensionError("segment_argmax: need 1..255 classes");
  SegmentationMask mask(w, h);
  for (std::size_t i = 0; i < h * w; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < scores.dim(1); ++j)
      if (scores.at(i, j) > scores.at(i, best)) best = j;
    mask.labels[i] = static_cast<std::uint8_t>(best);
  }
  return mask;
}

}  // namespace ovseg
