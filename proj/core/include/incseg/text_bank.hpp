#pragma once

#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "incseg/core_ops.hpp"
#include "incseg/tape.hpp"

namespace incseg::text {

using ad::Mat;
using ad::Param;
using ad::Tape;
using ad::Value;
using Vec = Eigen::VectorXd;

// Deterministic frozen token vectors: unit-norm, keyed by (seed, token bytes).
// Lookups are memoized; the cache is guarded so read-only model snapshots can
// encode concurrently.
class TokenEmbeddingTable {
 public:
  TokenEmbeddingTable(std::uint64_t seed, int dim) : seed_(seed), dim_(dim) {}

  std::uint64_t seed() const { return seed_; }
  int dim() const { return dim_; }
  Vec token_vector(const std::string& token) const;

 private:
  std::uint64_t seed_;
  int dim_;
  mutable std::mutex mutex_;
  mutable std::unordered_map<std::string, Vec> cache_;
};

// lowercase, whitespace split, leading/trailing punctuation stripped
std::vector<std::string> tokenize(const std::string& s);

// Frozen differentiable stand-in for a text encoder: mean-pool context rows
// and token vectors, apply a fixed seeded orthogonal map, L2-normalize.
// Swappable later behind this interface.
class TextEncoderBackend {
 public:
  virtual ~TextEncoderBackend() = default;
  virtual int dim() const = 0;
  // context may be null (template construction has no learnable context);
  // tokens may be empty when a context is present (background embeddings).
  virtual Value encode(Tape& t, const Value* context, const std::vector<std::string>& tokens) const = 0;
  virtual Vec encode_plain(const Mat* context, const std::vector<std::string>& tokens) const = 0;
};

class StubTextEncoder final : public TextEncoderBackend {
 public:
  StubTextEncoder(std::uint64_t seed, int dim);

  int dim() const override { return table_.dim(); }
  const TokenEmbeddingTable& table() const { return table_; }
  const Mat& frozen_map() const { return w_frozen_; }

  Value encode(Tape& t, const Value* context, const std::vector<std::string>& tokens) const override;
  Vec encode_plain(const Mat* context, const std::vector<std::string>& tokens) const override;

 private:
  Mat token_rows(const std::vector<std::string>& tokens) const;
  TokenEmbeddingTable table_;
  Mat w_frozen_;  // dim x dim, orthogonal
};

// Frozen text-derived anchors, one per foreground class.
struct TemplateBank {
  std::map<int, Vec> templates;          // class id -> unit vector
  std::vector<std::string> descriptions;  // format strings with one "{}" each

  bool has(int class_id) const { return templates.count(class_id) > 0; }
  const Vec& at(int class_id) const;
};

const std::vector<std::string>& default_descriptions();
std::vector<std::string> load_descriptions(const std::string& path);

// Learnable contexts: one per foreground class plus n background slots.
struct PromptStore {
  int context_len = 8;  // N_p
  int dim = 0;
  std::vector<Param> background;     // n contexts, each context_len x dim
  std::map<int, Param> foreground;   // class id -> context

  Param& class_context(int class_id);
  const Param& class_context(int class_id) const;
  bool has_class(int class_id) const { return foreground.count(class_id) > 0; }
};

struct ClassEmbeddingSet {
  std::vector<Vec> background;
  std::map<int, Vec> foreground;
};

// substitute the class name into one description line
std::string instantiate_description(const std::string& format, const std::string& class_name);

TemplateBank build_templates(const std::map<int, std::string>& class_names,
                             const TextEncoderBackend& enc,
                             const std::vector<std::string>& descriptions = default_descriptions());

// t_c = encode([p_c, tokens(name)]); recomputed per forward pass
Value build_class_embedding(Tape& t, int class_id, const std::string& class_name,
                            PromptStore& prompts, const TextEncoderBackend& enc);

Vec build_class_embedding_plain(int class_id, const std::string& class_name,
                                const PromptStore& prompts, const TextEncoderBackend& enc);

// n pairwise-orthogonal contexts (flattened inner product), Gram-Schmidt on
// seeded Gaussian draws
std::vector<Param> init_background_prompts(int n, std::uint64_t seed, int context_len, int dim);

// Copies the background context whose embedding is most similar to the new
// class's template; ties resolve to the lowest index. Returns the chosen index.
int transfer_weights(int class_id, const TemplateBank& templates,
                     const std::vector<Vec>& background_embeddings, PromptStore& prompts);

// Marks the contexts of the given classes frozen; background stays trainable.
void freeze_prompts(PromptStore& prompts, const std::vector<int>& class_ids);

}  // namespace incseg::text
