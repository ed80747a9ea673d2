#include "incseg/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace incseg {

namespace {

struct KeySpec {
  const char* key;
  const char* def;
  const char* doc;
};

// every tunable, flat and namespaced; defaults are the desk-scale setup
const std::vector<KeySpec>& schema() {
  static const std::vector<KeySpec> kSchema = {
      {"seed", "1234", "master seed; sub-seeds are derived per component"},
      // data
      {"data.num_classes", "6", "number of foreground classes in the synthetic corpus"},
      {"data.image_size", "64", "square image size in pixels"},
      {"data.n_train", "200", "training images to generate"},
      {"data.n_test", "60", "test images to generate"},
      {"data.shapes_min", "1", "minimum shapes per image"},
      {"data.shapes_max", "3", "maximum shapes per image"},
      {"data.texture_noise", "0.06", "pixel noise amplitude"},
      {"data.hue_spacing", "1.0", "hue spread between classes; <1 makes classes confusable"},
      {"data.assignment_seed", "7", "class-to-style assignment seed"},
      // backbone
      {"backbone.patch_size", "8", "patch size in pixels"},
      {"backbone.depth", "4", "transformer depth"},
      {"backbone.dim", "64", "embedding dimension C"},
      {"backbone.heads", "4", "attention heads"},
      {"backbone.mlp_ratio", "4", "FFN expansion"},
      {"backbone.fuse_layers", "2,3,4", "1-based block indices fused for dense features"},
      {"backbone.last_layer_mode", "vv_no_ffn_no_residual", "standard | vv_no_ffn_no_residual"},
      {"backbone.adapter", "true", "enable the post-encoder conv adapter"},
      {"backbone.trainable", "prompts,adapter,encoder", "subset of {prompts,adapter,encoder}"},
      // decoder
      {"decoder.depth", "2", "decoder blocks"},
      {"decoder.heads", "4", "decoder attention heads"},
      {"decoder.mlp_ratio", "4", "decoder FFN expansion"},
      // text
      {"text.context_len", "8", "learnable context length N_p"},
      {"text.n_background", "4", "background prototype count n"},
      {"text.templates_file", "", "description file (one format string per line); empty = built-in"},
      // toggles
      {"model.prompt_tuning", "true", "learnable per-class and background contexts"},
      {"model.manifold", "true", "multiple background prototypes + selective weight transfer"},
      {"lpd.enabled", "true", "stability/plasticity/dense losses (steps >= 2)"},
      {"mbd.enabled", "true", "background contrastive loss (steps >= 2)"},
      // lpd
      {"lpd.alpha", "1.0", "plasticity weight"},
      {"lpd.beta", "0.2", "dense weight"},
      {"lpd.temperature", "2.0", "dense-loss distillation temperature"},
      {"lpd.k", "0", "top-k edge budget; 0 = one edge per current-step class"},
      {"lpd.plasticity_form", "as_printed", "as_printed | orthogonal"},
      {"lpd.huber_delta", "1.0", "Huber transition point"},
      {"lpd.normalize_distances", "true", "normalize distance potentials by their mean"},
      // protocol
      {"protocol.split", "4-2", "class split, e.g. 15-1"},
      {"protocol.mode", "overlapped", "disjoint | overlapped | joint"},
      {"protocol.epochs", "20", "epochs per continual step"},
      {"protocol.batch", "8", "batch size"},
      {"protocol.base_lr", "3e-4", "base learning rate (step 1)"},
      {"protocol.incremental_lr_scale", "0.5", "LR scale for steps >= 2"},
      {"protocol.encoder_lr_scale", "0.3", "encoder LR relative to the current rate"},
      {"protocol.lambda_lpd", "1.0", "weight of the combined LPD loss"},
      {"protocol.lambda_bkg", "0.1", "weight of the background contrastive loss"},
      {"protocol.pseudo_tau", "0.7", "pseudo-label confidence threshold"},
      // optimizer
      {"optim.weight_decay", "0.0", "AdamW weight decay"},
      {"optim.beta1", "0.9", "AdamW beta1"},
      {"optim.beta2", "0.999", "AdamW beta2"},
      {"optim.eps", "1e-8", "AdamW epsilon"},
      // execution
      {"train.threads", "2", "worker threads for batch forward/backward"},
  };
  return kSchema;
}

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

ExperimentConfig::ExperimentConfig() {
  for (const auto& ks : schema()) values_[ks.key] = ks.def;
}

const std::map<std::string, std::string>& ExperimentConfig::defaults() {
  static const std::map<std::string, std::string> kDefaults = [] {
    std::map<std::string, std::string> m;
    for (const auto& ks : schema()) m[ks.key] = ks.def;
    return m;
  }();
  return kDefaults;
}

std::string ExperimentConfig::describe(const std::string& key) {
  for (const auto& ks : schema())
    if (key == ks.key) return ks.doc;
  throw std::invalid_argument("unknown config key: " + key);
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  ExperimentConfig c;
  c.load_file(path);
  return c;
}

void ExperimentConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    auto eq = t.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config line " + std::to_string(line_no) + " lacks '='");
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    if (!values_.count(key))
      throw std::runtime_error("unknown config key: " + key + " (line " +
                               std::to_string(line_no) + ")");
    values_[key] = value;
  }
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(trim(key));
  if (it == values_.end()) throw std::invalid_argument("unknown config key: " + key);
  it->second = trim(value);
}

bool ExperimentConfig::has(const std::string& key) const { return values_.count(key) > 0; }

const std::string& ExperimentConfig::raw(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw std::invalid_argument("unknown config key: " + key);
  return it->second;
}

long ExperimentConfig::get_int(const std::string& key) const {
  const std::string& v = raw(key);
  std::size_t pos = 0;
  long out = std::stol(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("config key " + key + " is not an integer: " + v);
  return out;
}

double ExperimentConfig::get_real(const std::string& key) const {
  const std::string& v = raw(key);
  std::size_t pos = 0;
  double out = std::stod(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("config key " + key + " is not a number: " + v);
  return out;
}

bool ExperimentConfig::get_bool(const std::string& key) const {
  const std::string& v = raw(key);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument("config key " + key + " is not a boolean: " + v);
}

std::string ExperimentConfig::get_string(const std::string& key) const { return raw(key); }

std::vector<int> ExperimentConfig::get_int_list(const std::string& key) const {
  std::vector<int> out;
  std::stringstream ss(raw(key));
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    if (!tok.empty()) out.push_back(std::stoi(tok));
  }
  return out;
}

std::string ExperimentConfig::resolved() const {
  std::ostringstream out;
  for (const auto& [k, v] : values_) out << k << " = " << v << "\n";
  return out.str();
}

ModelConfig to_model_config(const ExperimentConfig& c) {
  ModelConfig m;
  m.backbone.image_size = static_cast<int>(c.get_int("data.image_size"));
  m.backbone.patch_size = static_cast<int>(c.get_int("backbone.patch_size"));
  m.backbone.depth = static_cast<int>(c.get_int("backbone.depth"));
  m.backbone.dim = static_cast<int>(c.get_int("backbone.dim"));
  m.backbone.heads = static_cast<int>(c.get_int("backbone.heads"));
  m.backbone.mlp_ratio = static_cast<int>(c.get_int("backbone.mlp_ratio"));
  m.backbone.fuse_layers = c.get_int_list("backbone.fuse_layers");
  const std::string mode = c.get_string("backbone.last_layer_mode");
  if (mode == "standard") {
    m.backbone.last_layer_mode = vision::LastLayerMode::kStandard;
  } else if (mode == "vv_no_ffn_no_residual") {
    m.backbone.last_layer_mode = vision::LastLayerMode::kVvNoFfnNoResidual;
  } else {
    throw std::invalid_argument("backbone.last_layer_mode: unknown mode " + mode);
  }
  m.backbone.adapter_enabled = c.get_bool("backbone.adapter");
  m.backbone.trainable.clear();
  {
    std::stringstream ss(c.get_string("backbone.trainable"));
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      if (tok == "prompts") m.backbone.trainable.insert(vision::Component::kPrompts);
      else if (tok == "adapter") m.backbone.trainable.insert(vision::Component::kAdapter);
      else if (tok == "encoder") m.backbone.trainable.insert(vision::Component::kEncoder);
      else if (!tok.empty())
        throw std::invalid_argument("backbone.trainable: unknown component " + tok);
    }
  }
  m.decoder.depth = static_cast<int>(c.get_int("decoder.depth"));
  m.decoder.heads = static_cast<int>(c.get_int("decoder.heads"));
  m.decoder.mlp_ratio = static_cast<int>(c.get_int("decoder.mlp_ratio"));
  m.context_len = static_cast<int>(c.get_int("text.context_len"));
  m.prompt_tuning = c.get_bool("model.prompt_tuning");
  const bool manifold = c.get_bool("model.manifold");
  m.n_background = (m.prompt_tuning && manifold)
                       ? static_cast<int>(c.get_int("text.n_background"))
                       : 1;
  m.seed = static_cast<std::uint64_t>(c.get_int("seed"));
  return m;
}

data::ShapesConfig to_shapes_config(const ExperimentConfig& c) {
  data::ShapesConfig s;
  s.num_classes = static_cast<int>(c.get_int("data.num_classes"));
  s.image_size = static_cast<int>(c.get_int("data.image_size"));
  s.shapes_min = static_cast<int>(c.get_int("data.shapes_min"));
  s.shapes_max = static_cast<int>(c.get_int("data.shapes_max"));
  s.texture_noise = c.get_real("data.texture_noise");
  s.hue_spacing = c.get_real("data.hue_spacing");
  s.assignment_seed = static_cast<std::uint64_t>(c.get_int("data.assignment_seed"));
  return s;
}

losses::LpdConfig to_lpd_config(const ExperimentConfig& c) {
  losses::LpdConfig l;
  l.alpha = c.get_real("lpd.alpha");
  l.beta = c.get_real("lpd.beta");
  l.temperature = c.get_real("lpd.temperature");
  l.k = static_cast<int>(c.get_int("lpd.k"));
  const std::string form = c.get_string("lpd.plasticity_form");
  if (form == "as_printed") l.form = losses::PlasticityForm::kAsPrinted;
  else if (form == "orthogonal") l.form = losses::PlasticityForm::kOrthogonal;
  else throw std::invalid_argument("lpd.plasticity_form: unknown form " + form);
  l.huber.delta = c.get_real("lpd.huber_delta");
  l.normalize_distances = c.get_bool("lpd.normalize_distances");
  return l;
}

OptimConfig to_optim_config(const ExperimentConfig& c) {
  OptimConfig o;
  o.lr = c.get_real("protocol.base_lr");
  o.beta1 = c.get_real("optim.beta1");
  o.beta2 = c.get_real("optim.beta2");
  o.eps = c.get_real("optim.eps");
  o.weight_decay = c.get_real("optim.weight_decay");
  return o;
}

}  // namespace incseg
