#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "ovseg/encoder.hpp"
#include "ovseg/image.hpp"
#include "ovseg/params.hpp"
#include "ovseg/tensor.hpp"

namespace ovseg {

struct BiasConfig {
  double lambda = 0.3;
  void validate() const;  // ConfigError unless 0 <= lambda <= 1
};

struct ClassGroup {
  std::string name;
  std::vector<std::string> synonyms;
};

// Class groups plus one unit-norm embedding row per synonym, rows ordered by
// group then synonym.
class ClassVocabulary {
 public:
  ClassVocabulary() = default;
  ClassVocabulary(std::vector<ClassGroup> groups, Tensor embeddings);

  // Lines `display_name = syn1 | syn2`; `#` comments and blank lines skipped.
  // A line without `=` is a group whose only synonym is its name.
  static std::vector<ClassGroup> parse_groups(std::string_view text);

  // Embeddings looked up by synonym in an OVW1 file (each record [c]).
  static ClassVocabulary from_ovw1(std::vector<ClassGroup> groups, const ParamSet& embeddings);
  // Embeddings drawn from a stream keyed by the synonym string.
  static ClassVocabulary synthesize(std::vector<ClassGroup> groups, std::size_t dim, std::uint64_t seed);

  const std::vector<ClassGroup>& groups() const { return groups_; }
  const Tensor& embeddings() const { return embeddings_; }
  std::size_t num_groups() const { return groups_.size(); }
  std::size_t num_synonyms() const { return owner_.size(); }
  std::size_t dim() const { return embeddings_.dim(1); }
  // Group index of embedding row r.
  std::size_t group_of(std::size_t r) const { return owner_[r]; }

 private:
  std::vector<ClassGroup> groups_;
  Tensor embeddings_;
  std::vector<std::size_t> owner_;
};

// Unit vector from a stream keyed by `text`.
Tensor synthesize_text_embedding(std::string_view text, std::size_t dim, std::uint64_t seed);

// patches - lambda * cls, with patches [N x c] and cls [1 x c] or [c].
Tensor alleviate_global_bias(const Tensor& patches, const Tensor& cls, double lambda);
// Patch rows of `out` debiased by its own [CLS] row.
Tensor alleviate_global_bias(const TokenSequence& out, const BiasConfig& config);

// Cosine similarity of every patch row with every synonym embedding: [N x S].
// A zero-norm patch row raises ContractError naming its index.
Tensor similarity_logits(const Tensor& patches, const ClassVocabulary& vocab);

// Max over each group's synonym columns: [N x S] -> [N x G].
Tensor group_reduce(const Tensor& logits, const ClassVocabulary& vocab);

// Per-row argmax (lowest index wins ties), reshaped to h x w.
SegmentationMask segment_argmax(const Tensor& scores, std::size_t h, std::size_t w);

}  // namespace ovseg
