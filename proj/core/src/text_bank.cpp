#include "incseg/text_bank.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <stdexcept>

#include "incseg/rng.hpp"

namespace incseg::text {

Vec TokenEmbeddingTable::token_vector(const std::string& token) const {
  std::lock_guard<std::mutex> lock(mutex_);
  auto it = cache_.find(token);
  if (it != cache_.end()) return it->second;
  Rng rng(hash_bytes(token, seed_ ^ 0x746f6b656eull));  // "token"
  Vec v(dim_);
  for (int i = 0; i < dim_; ++i) v(i) = rng.normal();
  double n = v.norm();
  if (n == 0.0) v(0) = 1.0; else v /= n;
  return cache_.emplace(token, std::move(v)).first->second;
}

std::vector<std::string> tokenize(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    while (!cur.empty() && !std::isalnum(static_cast<unsigned char>(cur.front()))) cur.erase(cur.begin());
    while (!cur.empty() && !std::isalnum(static_cast<unsigned char>(cur.back()))) cur.pop_back();
    if (!cur.empty()) out.push_back(cur);
    cur.clear();
  };
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  flush();
  return out;
}

StubTextEncoder::StubTextEncoder(std::uint64_t seed, int dim) : table_(seed, dim) {
  // seeded Gaussian -> QR -> sign fix; orthogonal so the map preserves cosines
  Rng rng(derive_seed(seed, "text.frozen_map"));
  Mat g(dim, dim);
  for (int r = 0; r < dim; ++r)
    for (int c = 0; c < dim; ++c) g(r, c) = rng.normal();
  Eigen::HouseholderQR<Mat> qr(g);
  Mat q = qr.householderQ();
  Mat r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int i = 0; i < dim; ++i)
    if (r(i, i) < 0) q.col(i) = -q.col(i);
  w_frozen_ = q;
}

Mat StubTextEncoder::token_rows(const std::vector<std::string>& tokens) const {
  Mat rows(static_cast<Eigen::Index>(tokens.size()), table_.dim());
  for (std::size_t i = 0; i < tokens.size(); ++i)
    rows.row(static_cast<Eigen::Index>(i)) = table_.token_vector(tokens[i]).transpose();
  return rows;
}

Value StubTextEncoder::encode(Tape& t, const Value* context, const std::vector<std::string>& tokens) const {
  if (context == nullptr && tokens.empty())
    throw std::domain_error("encode_text: empty token list and no context");
  Value pooled;
  if (tokens.empty()) {
    pooled = t.mean_rows(*context);
  } else {
    Value tok = t.constant(token_rows(tokens));
    if (context != nullptr) {
      std::vector<Value> parts{*context, tok};
      pooled = t.mean_rows(t.concat_rows(parts));
    } else {
      pooled = t.mean_rows(tok);
    }
  }
  // pooled is 1 x C; map then normalize
  Value mapped = t.matmul(pooled, t.constant(w_frozen_.transpose()));
  return t.l2_normalize_rows(mapped);
}

Vec StubTextEncoder::encode_plain(const Mat* context, const std::vector<std::string>& tokens) const {
  if (context == nullptr && tokens.empty())
    throw std::domain_error("encode_text: empty token list and no context");
  Eigen::RowVectorXd pooled = Eigen::RowVectorXd::Zero(table_.dim());
  Eigen::Index rows = 0;
  if (context != nullptr) {
    pooled += context->colwise().sum();
    rows += context->rows();
  }
  for (const auto& tok : tokens) {
    pooled += table_.token_vector(tok).transpose();
    ++rows;
  }
  pooled /= static_cast<double>(rows);
  Vec mapped = w_frozen_ * pooled.transpose();
  double n = mapped.norm();
  if (n == 0.0) throw std::domain_error("encode_text: zero-norm embedding");
  return mapped / n;
}

const Vec& TemplateBank::at(int class_id) const {
  auto it = templates.find(class_id);
  if (it == templates.end())
    throw std::out_of_range("TemplateBank: no template for class " + std::to_string(class_id));
  return it->second;
}

const std::vector<std::string>& default_descriptions() {
  static const std::vector<std::string> kDescriptions = {
      "A photo of a {}.",
      "A snapshot of a {}.",
      "A bad photo of the {}.",
      "A clean origami {}.",
      "A photo of the large {}.",
      "A {} in a video game.",
      "Art of the {}.",
      "A photo of the small {}.",
      "A {} in the scene.",
  };
  return kDescriptions;
}

std::vector<std::string> load_descriptions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open description file: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.find("{}") == std::string::npos)
      throw std::runtime_error("description line lacks {} placeholder: " + line);
    lines.push_back(line);
  }
  if (lines.empty()) throw std::runtime_error("description file is empty: " + path);
  return lines;
}

std::string instantiate_description(const std::string& format, const std::string& class_name) {
  auto pos = format.find("{}");
  if (pos == std::string::npos)
    throw std::invalid_argument("description lacks {} placeholder: " + format);
  std::string out = format;
  out.replace(pos, 2, class_name);
  return out;
}

TemplateBank build_templates(const std::map<int, std::string>& class_names,
                             const TextEncoderBackend& enc,
                             const std::vector<std::string>& descriptions) {
  if (class_names.empty()) throw std::domain_error("build_templates: no class names");
  {
    std::vector<std::string> names;
    for (auto& [id, n] : class_names) names.push_back(n);
    std::sort(names.begin(), names.end());
    if (std::adjacent_find(names.begin(), names.end()) != names.end())
      throw std::domain_error("build_templates: duplicate class names");
  }
  TemplateBank bank;
  bank.descriptions = descriptions;
  for (auto& [id, name] : class_names) {
    Vec acc = Vec::Zero(enc.dim());
    for (const auto& d : descriptions)
      acc += enc.encode_plain(nullptr, tokenize(instantiate_description(d, name)));
    acc /= static_cast<double>(descriptions.size());
    double n = acc.norm();
    if (n == 0.0) throw std::domain_error("build_templates: zero-norm template for " + name);
    bank.templates[id] = acc / n;
  }
  return bank;
}

Param& PromptStore::class_context(int class_id) {
  auto it = foreground.find(class_id);
  if (it == foreground.end())
    throw std::out_of_range("PromptStore: no context for class " + std::to_string(class_id));
  return it->second;
}

const Param& PromptStore::class_context(int class_id) const {
  auto it = foreground.find(class_id);
  if (it == foreground.end())
    throw std::out_of_range("PromptStore: no context for class " + std::to_string(class_id));
  return it->second;
}

Value build_class_embedding(Tape& t, int class_id, const std::string& class_name,
                            PromptStore& prompts, const TextEncoderBackend& enc) {
  Param& ctx = prompts.class_context(class_id);
  Value c = t.param(ctx);
  return enc.encode(t, &c, tokenize(class_name));
}

Vec build_class_embedding_plain(int class_id, const std::string& class_name,
                                const PromptStore& prompts, const TextEncoderBackend& enc) {
  const Param& ctx = prompts.class_context(class_id);
  return enc.encode_plain(&ctx.value, tokenize(class_name));
}

std::vector<Param> init_background_prompts(int n, std::uint64_t seed, int context_len, int dim) {
  if (n < 1) throw std::domain_error("init_background_prompts: n must be >= 1");
  const Eigen::Index flat = static_cast<Eigen::Index>(context_len) * dim;
  if (n > flat)
    throw std::domain_error("init_background_prompts: cannot orthogonalize " + std::to_string(n) +
                            " contexts in dimension " + std::to_string(flat));
  Rng rng(derive_seed(seed, "text.bkg_prompts"));
  std::vector<Eigen::VectorXd> basis;
  basis.reserve(n);
  while (static_cast<int>(basis.size()) < n) {
    Eigen::VectorXd v(flat);
    for (Eigen::Index i = 0; i < flat; ++i) v(i) = rng.normal();
    for (const auto& b : basis) v -= b.dot(v) * b;
    double norm = v.norm();
    if (norm < 1e-8) continue;  // rare degenerate draw; redraw
    basis.push_back(v / norm);
  }
  std::vector<Param> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    Mat ctx(context_len, dim);
    for (int r = 0; r < context_len; ++r)
      for (int c = 0; c < dim; ++c) ctx(r, c) = basis[i](static_cast<Eigen::Index>(r) * dim + c);
    out.emplace_back("prompt.bkg." + std::to_string(i), std::move(ctx));
  }
  return out;
}

int transfer_weights(int class_id, const TemplateBank& templates,
                     const std::vector<Vec>& background_embeddings, PromptStore& prompts) {
  if (!templates.has(class_id))
    throw std::domain_error("transfer_weights: missing template for class " + std::to_string(class_id));
  if (background_embeddings.empty())
    throw std::domain_error("transfer_weights: no background embeddings");
  if (background_embeddings.size() != prompts.background.size())
    throw std::invalid_argument("transfer_weights: embedding/prompt count mismatch");
  const Vec& target = templates.at(class_id);
  int best = 0;
  double best_cos = ops::cosine_sim(background_embeddings[0], target);
  for (std::size_t i = 1; i < background_embeddings.size(); ++i) {
    double c = ops::cosine_sim(background_embeddings[i], target);
    if (c > best_cos) {  // strict: ties keep the lowest index
      best_cos = c;
      best = static_cast<int>(i);
    }
  }
  Param ctx("prompt.class." + std::to_string(class_id), prompts.background[best].value);
  prompts.foreground.insert_or_assign(class_id, std::move(ctx));
  return best;
}

void freeze_prompts(PromptStore& prompts, const std::vector<int>& class_ids) {
  for (int id : class_ids) prompts.class_context(id).trainable = false;
}

}  // namespace incseg::text
