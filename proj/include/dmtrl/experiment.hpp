#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "dmtrl/analysis.hpp"
#include "dmtrl/data.hpp"
#include "dmtrl/network.hpp"
#include "dmtrl/training.hpp"

namespace dmtrl {

/// IDX train and test files; every listed class becomes one one-vs-all task.
struct IdxSource {
  std::string train_images, train_labels, test_images, test_labels;
  std::vector<int> classes;  // empty: 0 .. T-1
  bool stratified = true;
};

/// Two tasks (parity, 8-way identity) over shared synthetic images.
struct SyntheticSource {
  std::uint64_t seed = 0;
  std::size_t train_size = 512;
  std::size_t test_size = 512;
  double sigma = -1.0;  // negative: generator default
};

using DataSource = std::variant<IdxSource, SyntheticSource>;

struct ExperimentConfig {
  NetworkSpec architecture;         // sharing fields unused; see `sharing`
  std::string sharing = "stl";      // preset name, or "custom" with `sharing_plan`
  std::vector<SharingMode> sharing_plan;  // one mode per parametrised layer
  InitPolicy init = StlInit{};
  TrainConfig train;
  DataSource data;
  std::vector<double> fractions{1.0};
  std::size_t repeats = 1;
  std::vector<std::string> presets;  // sweep grid; empty means {sharing}
  std::string output = "runs";
};

/// Strict parse: unknown or mistyped fields throw ConfigError naming the
/// field. Relative data paths are resolved against `base_dir`.
ExperimentConfig parse_config(const nlohmann::json& j, const std::string& base_dir = "");
ExperimentConfig load_config(const std::string& path);
nlohmann::json to_json(const ExperimentConfig& c);

nlohmann::json spec_to_json(const NetworkSpec& spec);
NetworkSpec spec_from_json(const nlohmann::json& j);

/// Sharing assignment of a preset: stl (all independent), udmtl-N (first N
/// parametrised layers tied), dmtrl-laf / dmtrl-tucker / dmtrl-tt (every
/// parametrised layer soft; the output layer stays independent when task
/// heads differ in width). "custom" applies the plan.
/// Throws ConfigError("sharing") for unknown presets or out-of-range N.
NetworkSpec expand_preset(const ExperimentConfig& c, const std::string& preset);

struct CellData {
  std::vector<TaskDataset> train, test;
  std::optional<std::vector<int>> class_labels;  // one-vs-all suites
};

/// Training sample for one (fraction, repeat) cell; every method in the cell
/// sees the same sample.
CellData load_cell_data(const ExperimentConfig& c, double fraction, std::size_t repeat);

/// Seed of a repeat, shared by sampling, initialisation and training.
std::uint64_t repeat_seed(const ExperimentConfig& c, std::size_t repeat);

struct MethodResult {
  std::string method;
  double fraction = 1.0;
  std::size_t repeat = 0;
  MultiTaskNetwork net;
  Evaluation eval;
  ParameterCount params;
  std::vector<std::pair<std::size_t, std::vector<std::size_t>>> ranks;  // soft layers after init
  std::vector<LayerSharing> sharing;                                     // soft layers after training
  TrainLog log;
  double seconds = 0.0;
};

/// Runs every method on one cell. Under STL init the single-task networks are
/// pretrained once and reused by all methods.
std::vector<MethodResult> run_cell(const ExperimentConfig& c, const std::vector<std::string>& methods, double fraction,
                                   std::size_t repeat);

/// Run directory of one sweep cell, "<method>_f<fraction>_r<repeat>".
std::string cell_dir_name(const std::string& method, double fraction, std::size_t repeat);

/// CSV rows (method,fraction,repeat,task,metric,value) for one result; numbers
/// use the shortest form that reads back exactly.
std::string csv_header();
std::string csv_rows(const std::string& method, double fraction, std::size_t repeat, const Evaluation& e);
std::string csv_rows(const MethodResult& r);

nlohmann::json sharing_json(const std::vector<LayerSharing>& rows, const NetworkSpec& spec);

/// Output of the CLI commands. All return the process exit code and write a
/// JSON error record to stderr on failure.
int cmd_train(const std::string& config_path, const std::string& out_dir);
int cmd_eval(const std::string& checkpoint, const std::string& data_path, const std::string& out_csv);
int cmd_measure(const std::string& checkpoint, const std::string& out_json);
int cmd_sweep(const std::string& config_path);

}  // namespace dmtrl
