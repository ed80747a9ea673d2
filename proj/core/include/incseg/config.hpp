#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "incseg/data_synth.hpp"
#include "incseg/losses.hpp"
#include "incseg/model.hpp"
#include "incseg/optimizer.hpp"

namespace incseg {

// Flat key=value experiment configuration. Every key has a typed default;
// unknown keys are rejected by name.
class ExperimentConfig {
 public:
  ExperimentConfig();  // defaults

  static ExperimentConfig from_file(const std::string& path);
  void load_file(const std::string& path);
  void set(const std::string& key, const std::string& value);  // "key=value" override

  bool has(const std::string& key) const;
  const std::string& raw(const std::string& key) const;

  long get_int(const std::string& key) const;
  double get_real(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::string get_string(const std::string& key) const;
  std::vector<int> get_int_list(const std::string& key) const;

  // sorted "key = value" lines, one per key
  std::string resolved() const;

  static const std::map<std::string, std::string>& defaults();
  static std::string describe(const std::string& key);

 private:
  std::map<std::string, std::string> values_;
};

// module-config assembly from the flat keys
ModelConfig to_model_config(const ExperimentConfig& c);
data::ShapesConfig to_shapes_config(const ExperimentConfig& c);
losses::LpdConfig to_lpd_config(const ExperimentConfig& c);
OptimConfig to_optim_config(const ExperimentConfig& c);

}  // namespace incseg
