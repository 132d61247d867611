#include "dmtrl/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "dmtrl/checkpoint.hpp"
#include "dmtrl/errors.hpp"
#include "dmtrl/overloaded.hpp"
#include "dmtrl/random.hpp"

namespace dmtrl {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Reads fields of one JSON object, rejecting anything not consumed.
class Fields {
 public:
  Fields(const json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw ConfigError(where(), "must be an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const json& at(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) throw ConfigError(where(key), "is required");
    return j_.at(key);
  }

  template <class T>
  T get(const std::string& key) {
    const json& v = at(key);
    try {
      return v.get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where(key), "has the wrong type");
    }
  }

  template <class T>
  T get(const std::string& key, T fallback) {
    if (!has(key)) return fallback;
    return get<T>(key);
  }

  std::size_t count(const std::string& key, std::size_t fallback, bool positive = true) {
    if (!has(key)) return fallback;
    const json& v = at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0 || (positive && v.get<long long>() == 0))
      throw ConfigError(where(key), positive ? "must be a positive integer" : "must be a non-negative integer");
    return v.get<std::size_t>();
  }

  std::size_t count(const std::string& key) {
    at(key);
    return count(key, 0);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(where(it.key()), "unknown field");
  }

  std::string where(const std::string& key = "") const {
    if (key.empty()) return prefix_.empty() ? "config" : prefix_;
    return prefix_.empty() ? key : prefix_ + "." + key;
  }

 private:
  const json& j_;
  std::string prefix_;
  std::set<std::string> seen_;
};

std::string resolve(const std::string& base, const std::string& path) {
  if (base.empty() || fs::path(path).is_absolute()) return path;
  return (fs::path(base) / path).lexically_normal().string();
}

NetworkSpec parse_architecture(const json& j) {
  Fields f(j, "architecture");
  NetworkSpec spec;
  spec.input_shape = f.get<std::vector<std::size_t>>("input_shape");
  if (spec.input_shape.empty() || spec.input_shape.size() == 2 || spec.input_shape.size() > 3)
    throw ConfigError("architecture.input_shape", "must be [D] or [H, W, C]");
  spec.task_count = f.count("tasks");
  spec.output_dims = f.get<std::vector<std::size_t>>("output_dims", {});

  Shape shape = spec.input_shape;
  const json& layers = f.at("layers");
  if (!layers.is_array() || layers.empty()) throw ConfigError("architecture.layers", "must be a non-empty array");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    Fields l(layers[i], "architecture.layers[" + std::to_string(i) + "]");
    const auto type = l.get<std::string>("type");
    if (type == "conv") {
      if (shape.size() != 3) throw ConfigError(l.where("type"), "conv needs an H x W x C input");
      Conv2d c{l.count("h"), l.count("w"), shape[2], l.count("out")};
      if (c.h > shape[0] || c.w > shape[1]) throw ConfigError(l.where("h"), "kernel larger than its input");
      shape = {shape[0] - c.h + 1, shape[1] - c.w + 1, c.out_channels};
      spec.layers.push_back({c});
    } else if (type == "fc") {
      const std::size_t in = std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
      FullyConnected c{in, l.count("out")};
      shape = {c.out};
      spec.layers.push_back({c});
    } else if (type == "pool") {
      if (shape.size() != 3) throw ConfigError(l.where("type"), "pool needs an H x W x C input");
      shape = {shape[0] / 2, shape[1] / 2, shape[2]};
      spec.layers.push_back({MaxPool2{}});
    } else if (type == "relu") {
      spec.layers.push_back({Activation::relu});
    } else if (type == "tanh") {
      spec.layers.push_back({Activation::tanh});
    } else {
      throw ConfigError(l.where("type"), "unknown layer type '" + type + "'");
    }
    l.finish();
  }
  f.finish();
  if (!spec.output_dims.empty() && spec.output_dims.size() != spec.task_count)
    throw ConfigError("architecture.output_dims", "needs one entry per task");
  try {
    validate(spec);
  } catch (const std::exception& e) {
    throw ConfigError("architecture", e.what());
  }
  return spec;
}

json layer_json(const LayerSpec& l) {
  json j = std::visit(overloaded{[](const FullyConnected& c) { return json{{"type", "fc"}, {"in", c.in}, {"out", c.out}}; },
                                 [](const Conv2d& c) {
                                   return json{{"type", "conv"}, {"h", c.h}, {"w", c.w}, {"in", c.in_channels}, {"out", c.out_channels}};
                                 },
                                 [](const MaxPool2&) { return json{{"type", "pool"}}; },
                                 [](const Activation& a) { return json{{"type", a == Activation::relu ? "relu" : "tanh"}}; }},
                      l.kind);
  if (has_parameters(l)) j["sharing"] = to_string(l.sharing);
  return j;
}

InitPolicy parse_init(const json& j) {
  Fields f(j, "init");
  const auto policy = f.get<std::string>("policy");
  InitPolicy out;
  if (policy == "stl") {
    StlInit s;
    s.pretrain_epochs = f.count("pretrain_epochs", s.pretrain_epochs, false);
    s.epsilon = f.get<double>("epsilon", s.epsilon);
    out = s;
  } else if (policy == "random_decompose") {
    RandomDecompose r;
    r.epsilon = f.get<double>("epsilon", r.epsilon);
    out = r;
  } else if (policy == "random") {
    out = PlainRandom{};
  } else {
    throw ConfigError("init.policy", "unknown policy '" + policy + "'");
  }
  f.finish();
  std::visit(overloaded{[](const StlInit& s) {
                          if (!(s.epsilon >= 0.0 && s.epsilon < 1.0)) throw ConfigError("init.epsilon", "must lie in [0, 1)");
                        },
                        [](const RandomDecompose& r) {
                          if (!(r.epsilon >= 0.0 && r.epsilon < 1.0)) throw ConfigError("init.epsilon", "must lie in [0, 1)");
                        },
                        [](const PlainRandom&) {}},
             out);
  return out;
}

json init_json(const InitPolicy& p) {
  return std::visit(overloaded{[](const StlInit& s) {
                                 return json{{"policy", "stl"}, {"pretrain_epochs", s.pretrain_epochs}, {"epsilon", s.epsilon}};
                               },
                               [](const RandomDecompose& r) { return json{{"policy", "random_decompose"}, {"epsilon", r.epsilon}}; },
                               [](const PlainRandom&) { return json{{"policy", "random"}}; }},
                    p);
}

TrainConfig parse_train(const json& j) {
  Fields f(j, "train");
  TrainConfig c;
  const auto opt = f.get<std::string>("optimizer", "adam");
  if (opt == "sgd") {
    c.optimizer = Sgd{};
  } else if (opt == "momentum") {
    c.optimizer = Momentum{f.get<double>("momentum", 0.9)};
  } else if (opt == "adam") {
    Adam a;
    a.beta1 = f.get<double>("beta1", a.beta1);
    a.beta2 = f.get<double>("beta2", a.beta2);
    a.epsilon = f.get<double>("adam_epsilon", a.epsilon);
    c.optimizer = a;
  } else {
    throw ConfigError("train.optimizer", "unknown optimizer '" + opt + "'");
  }
  c.learning_rate = f.get<double>("learning_rate", c.learning_rate);
  c.batch_size = f.count("batch_size", c.batch_size);
  c.epochs = f.count("epochs", c.epochs, false);
  c.seed = f.get<std::uint64_t>("seed", c.seed);
  if (f.get<std::string>("task_sampling", "round_robin") != "round_robin")
    throw ConfigError("train.task_sampling", "only round_robin is supported");
  f.finish();
  try {
    validate(c);
  } catch (const ConfigError& e) {
    throw ConfigError("train." + e.field(), e.what());
  }
  return c;
}

json train_json(const TrainConfig& c) {
  json j{{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size}, {"epochs", c.epochs}, {"seed", c.seed},
         {"task_sampling", "round_robin"}};
  std::visit(overloaded{[&](const Sgd&) { j["optimizer"] = "sgd"; },
                        [&](const Momentum& m) {
                          j["optimizer"] = "momentum";
                          j["momentum"] = m.mu;
                        },
                        [&](const Adam& a) {
                          j["optimizer"] = "adam";
                          j["beta1"] = a.beta1;
                          j["beta2"] = a.beta2;
                          j["adam_epsilon"] = a.epsilon;
                        }},
             c.optimizer);
  return j;
}

DataSource parse_data(const json& j, const std::string& base) {
  Fields f(j, "data");
  const auto source = f.get<std::string>("source");
  DataSource out;
  if (source == "idx") {
    IdxSource s;
    s.train_images = resolve(base, f.get<std::string>("train_images"));
    s.train_labels = resolve(base, f.get<std::string>("train_labels"));
    s.test_images = resolve(base, f.get<std::string>("test_images"));
    s.test_labels = resolve(base, f.get<std::string>("test_labels"));
    s.classes = f.get<std::vector<int>>("classes", {});
    s.stratified = f.get<bool>("stratified", true);
    out = s;
  } else if (source == "synthetic") {
    SyntheticSource s;
    s.seed = f.get<std::uint64_t>("seed", s.seed);
    s.train_size = f.count("train_size", s.train_size);
    s.test_size = f.count("test_size", s.test_size);
    s.sigma = f.get<double>("sigma", s.sigma);
    if (s.train_size < 8 || s.test_size < 8) throw ConfigError("data.train_size", "synthetic data needs at least 8 items");
    out = s;
  } else {
    throw ConfigError("data.source", "unknown source '" + source + "'");
  }
  f.finish();
  return out;
}

json data_json(const DataSource& d) {
  return std::visit(overloaded{[](const IdxSource& s) {
                                 return json{{"source", "idx"},          {"train_images", s.train_images},
                                             {"train_labels", s.train_labels}, {"test_images", s.test_images},
                                             {"test_labels", s.test_labels},   {"classes", s.classes},
                                             {"stratified", s.stratified}};
                               },
                               [](const SyntheticSource& s) {
                                 return json{{"source", "synthetic"}, {"seed", s.seed}, {"train_size", s.train_size},
                                             {"test_size", s.test_size}, {"sigma", s.sigma}};
                               }},
                    d);
}

std::size_t parametrised_count(const NetworkSpec& spec) {
  return static_cast<std::size_t>(std::count_if(spec.layers.begin(), spec.layers.end(), has_parameters));
}

bool heterogeneous_heads(const NetworkSpec& spec) {
  for (std::size_t t = 1; t < spec.task_count; ++t)
    if (output_dim(spec, t) != output_dim(spec, 0)) return true;
  return false;
}

std::string layer_name(const NetworkSpec& spec, std::size_t layer) {
  std::size_t conv = 0, fc = 0;
  for (std::size_t i = 0; i <= layer; ++i) {
    if (std::holds_alternative<Conv2d>(spec.layers[i].kind)) ++conv;
    if (std::holds_alternative<FullyConnected>(spec.layers[i].kind)) ++fc;
  }
  if (std::holds_alternative<Conv2d>(spec.layers[layer].kind)) return "conv" + std::to_string(conv);
  if (std::holds_alternative<FullyConnected>(spec.layers[layer].kind)) return "fc" + std::to_string(fc);
  return "layer" + std::to_string(layer);
}

// Shortest text that reads back to the same double.
std::string fmt_exact(double v) {
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + p.string());
}

json read_json(const std::string& path, const std::string& what) {
  std::ifstream in(path);
  if (!in) throw ConfigError(what, "cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(what, std::string("invalid JSON: ") + e.what());
  }
}

int report_error(const std::exception& e) {
  json rec{{"message", e.what()}};
  int code = 1;
  if (const auto* c = dynamic_cast<const ConfigError*>(&e)) {
    rec["error"] = "config";
    rec["field"] = c->field();
    code = 2;
  } else if (dynamic_cast<const DataError*>(&e)) {
    rec["error"] = "data";
    code = 3;
  } else if (dynamic_cast<const CheckpointError*>(&e)) {
    rec["error"] = "checkpoint";
    code = 4;
  } else if (const auto* t = dynamic_cast<const TrainingError*>(&e)) {
    rec["error"] = "training";
    rec["step"] = t->step();
    code = 5;
  } else if (dynamic_cast<const ShapeError*>(&e)) {
    rec["error"] = "shape";
  } else {
    rec["error"] = "internal";
  }
  std::cerr << rec.dump() << "\n";
  return code;
}

template <class F>
int guarded(F&& body) {
  try {
    body();
    return 0;
  } catch (const std::exception& e) {
    return report_error(e);
  }
}

std::vector<TaskDataset> synthetic_tasks(const HeterogeneousData& h) { return {h.parity, h.identity}; }

json ranks_json(const MethodResult& r) {
  json out = json::array();
  for (const auto& [layer, ranks] : r.ranks)
    out.push_back({{"layer", layer}, {"name", layer_name(r.net.spec(), layer)}, {"sharing", to_string(r.net.sharing(layer))},
                   {"ranks", ranks}});
  return out;
}

json result_json(const MethodResult& r) {
  json j{{"method", r.method},
         {"fraction", r.fraction},
         {"repeat", r.repeat},
         {"parameters", r.params.total},
         {"parameters_per_layer", r.params.per_layer},
         {"parameter_ratio", r.params.ratio},
         {"task_error", r.eval.task_error},
         {"mean_error", r.eval.mean_error},
         {"seconds", r.seconds},
         {"ranks", ranks_json(r)},
         {"sharing", sharing_json(r.sharing, r.net.spec())}};
  if (r.eval.multiclass_error) j["multiclass_error"] = *r.eval.multiclass_error;
  json log = json::array();
  for (const auto& rec : r.log.records)
    log.push_back({{"epoch", rec.epoch}, {"task", rec.task}, {"loss", rec.loss}, {"error", rec.error}});
  j["log"] = log;
  return j;
}

// Single-task network `task` cut out of an independent multi-task network.
MultiTaskNetwork split_task(const MultiTaskNetwork& net, std::size_t task) {
  NetworkSpec single = net.spec();
  single.task_count = 1;
  single.output_dims = net.spec().output_dims.empty() ? std::vector<std::size_t>{}
                                                      : std::vector<std::size_t>{net.spec().output_dims[task]};
  MultiTaskNetwork out(single);
  for (std::size_t i : net.parametrised_layers()) {
    out.set_weight(i, 0, net.weight(i, task));
    out.set_bias(i, 0, net.bias(i, task));
  }
  return out;
}


void write_run(const fs::path& dir, const ExperimentConfig& c, const MethodResult& r) {
  fs::create_directories(dir);
  save_checkpoint((dir / "model.dmtl").string(), r.net.state());
  json checkpoints = json::array();
  checkpoints.push_back({{"file", "model.dmtl"}, {"spec", spec_to_json(r.net.spec())}});
  if (r.method == "stl") {
    for (std::size_t t = 0; t < r.net.task_count(); ++t) {
      const MultiTaskNetwork single = split_task(r.net, t);
      const std::string file = "task_" + std::to_string(t) + ".dmtl";
      save_checkpoint((dir / file).string(), single.state());
      checkpoints.push_back({{"file", file}, {"spec", spec_to_json(single.spec())}, {"task", t}});
    }
  }
  json manifest = result_json(r);
  manifest.erase("log");
  manifest["checkpoint_version"] = kCheckpointVersion;
  manifest["checkpoints"] = checkpoints;
  manifest["config"] = to_json(c);
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  json log = json::array();
  for (const auto& rec : r.log.records)
    log.push_back({{"epoch", rec.epoch}, {"task", rec.task}, {"loss", rec.loss}, {"error", rec.error}});
  write_text(dir / "log.json", log.dump(2) + "\n");
}

}  // namespace

ExperimentConfig parse_config(const json& j, const std::string& base_dir) {
  Fields f(j, "");
  ExperimentConfig c;
  c.architecture = parse_architecture(f.at("architecture"));
  const json& sharing = f.at("sharing");
  if (sharing.is_string()) {
    c.sharing = sharing.get<std::string>();
  } else if (sharing.is_array()) {
    c.sharing = "custom";
    for (const auto& m : sharing) {
      if (!m.is_string()) throw ConfigError("sharing", "plan entries must be mode names");
      try {
        c.sharing_plan.push_back(parse_sharing_mode(m.get<std::string>()));
      } catch (const std::invalid_argument& e) {
        throw ConfigError("sharing", e.what());
      }
    }
  } else {
    throw ConfigError("sharing", "must be a preset name or a per-layer list");
  }
  if (f.has("init")) c.init = parse_init(f.at("init"));
  if (f.has("train")) c.train = parse_train(f.at("train"));
  c.data = parse_data(f.at("data"), base_dir);
  c.fractions = f.get<std::vector<double>>("fractions", c.fractions);
  if (c.fractions.empty()) throw ConfigError("fractions", "must not be empty");
  for (double x : c.fractions)
    if (!(x > 0.0 && x <= 1.0)) throw ConfigError("fractions", "entries must lie in (0, 1]");
  c.repeats = f.count("repeats", c.repeats);
  c.presets = f.get<std::vector<std::string>>("presets", {});
  c.output = resolve(base_dir, f.get<std::string>("output", c.output));
  f.finish();

  expand_preset(c, c.sharing);
  for (const auto& p : c.presets) expand_preset(c, p);
  if (const auto* s = std::get_if<SyntheticSource>(&c.data)) {
    (void)s;
    if (c.architecture.task_count != 2) throw ConfigError("architecture.tasks", "synthetic data has two tasks");
    if (output_dim(c.architecture, 0) != 1 || output_dim(c.architecture, 1) != 8)
      throw ConfigError("architecture.output_dims", "synthetic data needs heads of width 1 and 8");
  } else {
    const auto& idx = std::get<IdxSource>(c.data);
    if (!idx.classes.empty() && idx.classes.size() != c.architecture.task_count)
      throw ConfigError("data.classes", "needs one class per task");
    for (std::size_t t = 0; t < c.architecture.task_count; ++t)
      if (output_dim(c.architecture, t) != 1) throw ConfigError("architecture.output_dims", "one-vs-all tasks need width 1");
  }
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  const json j = read_json(path, "config");
  return parse_config(j, fs::path(path).parent_path().string());
}

json spec_to_json(const NetworkSpec& spec) {
  json layers = json::array();
  for (const auto& l : spec.layers) layers.push_back(layer_json(l));
  return {{"input_shape", spec.input_shape}, {"layers", layers}, {"tasks", spec.task_count}, {"output_dims", spec.output_dims}};
}

NetworkSpec spec_from_json(const json& j) {
  try {
    NetworkSpec spec;
    spec.input_shape = j.at("input_shape").get<Shape>();
    spec.task_count = j.at("tasks").get<std::size_t>();
    spec.output_dims = j.at("output_dims").get<std::vector<std::size_t>>();
    for (const auto& l : j.at("layers")) {
      const auto type = l.at("type").get<std::string>();
      LayerSpec ls;
      if (type == "fc")
        ls.kind = FullyConnected{l.at("in").get<std::size_t>(), l.at("out").get<std::size_t>()};
      else if (type == "conv")
        ls.kind = Conv2d{l.at("h").get<std::size_t>(), l.at("w").get<std::size_t>(), l.at("in").get<std::size_t>(),
                         l.at("out").get<std::size_t>()};
      else if (type == "pool")
        ls.kind = MaxPool2{};
      else if (type == "relu")
        ls.kind = Activation::relu;
      else if (type == "tanh")
        ls.kind = Activation::tanh;
      else
        throw CheckpointError("unknown layer type '" + type + "' in manifest");
      if (l.contains("sharing")) ls.sharing = parse_sharing_mode(l.at("sharing").get<std::string>());
      spec.layers.push_back(ls);
    }
    validate(spec);
    return spec;
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed network description: ") + e.what());
  }
}

json to_json(const ExperimentConfig& c) {
  json arch = spec_to_json(c.architecture);
  // Config form: input widths are inferred and sharing lives in "sharing".
  for (auto& l : arch["layers"]) {
    l.erase("in");
    l.erase("sharing");
  }
  json sharing = c.sharing;
  if (c.sharing == "custom") {
    sharing = json::array();
    for (auto m : c.sharing_plan) sharing.push_back(to_string(m));
  }
  return {{"architecture", arch},         {"sharing", sharing},          {"init", init_json(c.init)},
          {"train", train_json(c.train)}, {"data", data_json(c.data)},   {"fractions", c.fractions},
          {"repeats", c.repeats},         {"presets", c.presets},        {"output", c.output}};
}

NetworkSpec expand_preset(const ExperimentConfig& c, const std::string& preset) {
  const NetworkSpec& base = c.architecture;
  const std::size_t n_param = parametrised_count(base);
  NetworkSpec spec;
  try {
    if (preset == "stl") {
      spec = with_sharing(base, SharingMode::independent, false);
    } else if (preset.rfind("udmtl-", 0) == 0) {
      const std::string digits = preset.substr(6);
      if (digits.empty() || !std::all_of(digits.begin(), digits.end(), ::isdigit))
        throw ConfigError("sharing", "malformed preset '" + preset + "'");
      const std::size_t n = std::stoul(digits);
      if (n < 1 || n >= n_param)
        throw ConfigError("sharing", preset + " needs 1 <= N < " + std::to_string(n_param) + " (parametrised layers)");
      spec = with_sharing(base, SharingMode::independent, false);
      std::size_t seen = 0;
      for (auto& l : spec.layers)
        if (has_parameters(l) && seen++ < n) l.sharing = SharingMode::tied;
    } else if (preset == "dmtrl-laf") {
      spec = with_sharing(base, SharingMode::soft_laf, heterogeneous_heads(base));
    } else if (preset == "dmtrl-tucker") {
      spec = with_sharing(base, SharingMode::soft_tucker, heterogeneous_heads(base));
    } else if (preset == "dmtrl-tt") {
      spec = with_sharing(base, SharingMode::soft_tt, heterogeneous_heads(base));
    } else if (preset == "custom") {
      if (c.sharing_plan.size() != n_param)
        throw ConfigError("sharing", "plan has " + std::to_string(c.sharing_plan.size()) + " entries for " +
                                         std::to_string(n_param) + " parametrised layers");
      spec = base;
      std::size_t k = 0;
      for (auto& l : spec.layers)
        if (has_parameters(l)) l.sharing = c.sharing_plan[k++];
    } else {
      throw ConfigError("sharing", "unknown preset '" + preset + "'");
    }
    validate(spec);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("sharing", e.what());
  }
  return spec;
}

std::uint64_t repeat_seed(const ExperimentConfig& c, std::size_t repeat) { return Rng::mix({c.train.seed, repeat}); }

std::string cell_dir_name(const std::string& method, double fraction, std::size_t repeat) {
  return method + "_f" + fmt_exact(fraction) + "_r" + std::to_string(repeat);
}

CellData load_cell_data(const ExperimentConfig& c, double fraction, std::size_t repeat) {
  const std::uint64_t seed = repeat_seed(c, repeat);
  CellData out;
  if (const auto* s = std::get_if<SyntheticSource>(&c.data)) {
    SynthOptions train_opts{s->sigma, 0}, test_opts{s->sigma, 1};
    auto train = synth_heterogeneous(s->seed, s->train_size, train_opts);
    const auto test = synth_heterogeneous(s->seed, s->test_size, test_opts);
    if (fraction < 1.0) {
      train.identity = sample_fraction(train.identity, fraction, seed, true);
      train.parity = train.identity;
      train.parity.task_id = 0;
      train.parity.kind = LabelKind::binary;
      train.parity.class_count = 2;
      for (auto& y : train.parity.labels) y = y % 2 == 0 ? 1 : -1;
    }
    out.train = synthetic_tasks(train);
    out.test = synthetic_tasks(test);
    return out;
  }
  const auto& idx = std::get<IdxSource>(c.data);
  const TaskDataset raw = load_idx(idx.train_images, idx.train_labels, Split::train);
  const TaskDataset test = load_idx(idx.test_images, idx.test_labels, Split::test);
  const Shape& want = c.architecture.input_shape;
  if (!std::equal(want.begin(), want.end(), raw.inputs.shape().begin() + 1) || raw.inputs.rank() != want.size() + 1)
    throw DataError("images are " + shape_string(raw.inputs.shape()) + ", the architecture expects " + shape_string(want));
  const TaskDataset sample = sample_fraction(raw, fraction, seed, idx.stratified);
  std::vector<int> classes = idx.classes;
  if (classes.empty())
    for (std::size_t t = 0; t < c.architecture.task_count; ++t) classes.push_back(static_cast<int>(t));
  for (int cls : classes) {
    out.train.push_back(make_one_vs_all(sample, cls));
    out.test.push_back(make_one_vs_all(test, cls));
  }
  // Multiclass error ranks the task scores, so it needs the full class set in task order.
  std::vector<int> mapped(test.size(), -1);
  bool complete = true;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto it = std::find(classes.begin(), classes.end(), test.labels[i]);
    if (it == classes.end()) complete = false;
    else mapped[i] = static_cast<int>(it - classes.begin());
  }
  if (complete) out.class_labels = std::move(mapped);
  return out;
}

std::vector<MethodResult> run_cell(const ExperimentConfig& c, const std::vector<std::string>& methods, double fraction,
                                   std::size_t repeat) {
  const CellData data = load_cell_data(c, fraction, repeat);
  TrainConfig cfg = c.train;
  cfg.seed = repeat_seed(c, repeat);

  std::vector<MultiTaskNetwork> stl;
  const auto* stl_init = std::get_if<StlInit>(&c.init);
  if (stl_init) {
    TrainConfig pre = cfg;
    pre.epochs = stl_init->pretrain_epochs;
    stl = pretrain_stl(with_sharing(c.architecture, SharingMode::independent, false), data.train, pre);
  }

  std::vector<MethodResult> out;
  for (const auto& method : methods) {
    const NetworkSpec spec = expand_preset(c, method);
    const auto start = std::chrono::steady_clock::now();
    MultiTaskNetwork net = stl_init ? init_from_stl(stl, spec, stl_init->epsilon) : build_network(spec, c.init, cfg.seed);
    std::vector<std::pair<std::size_t, std::vector<std::size_t>>> ranks;
    for (std::size_t i : net.parametrised_layers())
      if (is_soft(net.sharing(i))) ranks.emplace_back(i, factor_ranks(net.factors(i)));
    TrainLog log = train(net, data.train, cfg);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    Evaluation eval = evaluate(net, data.test, data.class_labels ? &*data.class_labels : nullptr);
    std::vector<LayerSharing> sharing;
    if (!ranks.empty()) sharing = sharing_report(net);
    ParameterCount params = count_parameters(net);
    out.push_back(MethodResult{method, fraction, repeat, std::move(net), std::move(eval), std::move(params), std::move(ranks),
                               std::move(sharing), std::move(log), seconds});
  }
  return out;
}

std::string csv_header() { return "method,fraction,repeat,task,metric,value\n"; }

std::string csv_rows(const std::string& method, double fraction, std::size_t repeat, const Evaluation& e) {
  std::ostringstream os;
  const std::string prefix = method + "," + fmt_exact(fraction) + "," + std::to_string(repeat) + ",";
  for (std::size_t t = 0; t < e.task_error.size(); ++t) os << prefix << t << ",error," << fmt_exact(e.task_error[t]) << "\n";
  os << prefix << "all,mean_error," << fmt_exact(e.mean_error) << "\n";
  if (e.multiclass_error) os << prefix << "all,multiclass_error," << fmt_exact(*e.multiclass_error) << "\n";
  return os.str();
}

std::string csv_rows(const MethodResult& r) {
  std::ostringstream os;
  os << csv_rows(r.method, r.fraction, r.repeat, r.eval);
  const std::string prefix = r.method + "," + fmt_exact(r.fraction) + "," + std::to_string(r.repeat) + ",all,";
  os << prefix << "parameters," << r.params.total << "\n";
  for (const auto& row : r.sharing) os << prefix << "rho_" << layer_name(r.net.spec(), row.layer) << "," << fmt_exact(row.rho) << "\n";
  return os.str();
}

json sharing_json(const std::vector<LayerSharing>& rows, const NetworkSpec& spec) {
  json out = json::array();
  for (const auto& r : rows)
    out.push_back({{"layer", r.layer},
                   {"name", layer_name(spec, r.layer)},
                   {"sharing", to_string(r.mode)},
                   {"k", r.k},
                   {"t", r.t},
                   {"rho", r.rho},
                   {"rho_raw", r.rho_raw},
                   {"top_pair", {r.top.a, r.top.b, r.top.cosine}},
                   {"bottom_pair", {r.bottom.a, r.bottom.b, r.bottom.cosine}}});
  return out;
}

int cmd_train(const std::string& config_path, const std::string& out_dir) {
  return guarded([&] {
    const ExperimentConfig c = load_config(config_path);
    auto results = run_cell(c, {c.sharing}, c.fractions.front(), 0);
    write_run(out_dir, c, results.front());
  });
}

namespace {

struct LoadedCheckpoint {
  MultiTaskNetwork net;
  json manifest;
  std::optional<std::size_t> task;
};

LoadedCheckpoint load_with_manifest(const std::string& checkpoint) {
  const fs::path ckpt(checkpoint);
  const fs::path manifest_path = ckpt.parent_path() / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw CheckpointError("no manifest.json next to " + checkpoint);
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::parse_error& e) {
    throw CheckpointError(std::string("manifest is not valid JSON: ") + e.what());
  }
  if (manifest.value("checkpoint_version", 0u) != kCheckpointVersion)
    throw CheckpointError("manifest records checkpoint version " + manifest.value("checkpoint_version", json(0)).dump() +
                          ", expected " + std::to_string(kCheckpointVersion));
  for (const auto& entry : manifest.at("checkpoints")) {
    if (entry.at("file").get<std::string>() != ckpt.filename().string()) continue;
    NetworkSpec spec = spec_from_json(entry.at("spec"));
    std::optional<std::size_t> task;
    if (entry.contains("task")) task = entry.at("task").get<std::size_t>();
    try {
      return {MultiTaskNetwork::from_state(std::move(spec), load_checkpoint(checkpoint)), std::move(manifest), task};
    } catch (const std::invalid_argument& e) {
      throw CheckpointError(checkpoint + " does not match its manifest: " + e.what());
    }
  }
  throw CheckpointError(ckpt.filename().string() + " is not listed in its manifest");
}

}  // namespace

int cmd_eval(const std::string& checkpoint, const std::string& data_path, const std::string& out_csv) {
  return guarded([&] {
    LoadedCheckpoint loaded = load_with_manifest(checkpoint);
    ExperimentConfig c = parse_config(loaded.manifest.at("config"));
    const json data_json_in = read_json(data_path, "data");
    const json& source = data_json_in.contains("data") ? data_json_in.at("data") : data_json_in;
    c.data = parse_data(source, fs::path(data_path).parent_path().string());
    const CellData data = load_cell_data(c, 1.0, 0);
    std::vector<TaskDataset> test = data.test;
    const std::vector<int>* classes = data.class_labels ? &*data.class_labels : nullptr;
    if (loaded.task) {
      if (*loaded.task >= test.size()) throw DataError("checkpoint task is outside the data's task list");
      test = {test[*loaded.task]};
      classes = nullptr;
    }
    const Evaluation e = evaluate(loaded.net, test, classes);
    const std::string method = loaded.manifest.at("method").get<std::string>();
    const double fraction = loaded.manifest.at("fraction").get<double>();
    const std::size_t repeat = loaded.manifest.at("repeat").get<std::size_t>();
    write_text(out_csv, csv_header() + csv_rows(method, fraction, repeat, e));
  });
}

int cmd_measure(const std::string& checkpoint, const std::string& out_json) {
  return guarded([&] {
    LoadedCheckpoint loaded = load_with_manifest(checkpoint);
    bool soft = false;
    for (std::size_t i : loaded.net.parametrised_layers()) soft = soft || is_soft(loaded.net.sharing(i));
    if (!soft) throw CheckpointError("checkpoint has no soft-shared layer to measure");
    const json out{{"method", loaded.manifest.value("method", "")},
                   {"layers", sharing_json(sharing_report(loaded.net), loaded.net.spec())}};
    write_text(out_json, out.dump(2) + "\n");
  });
}

int cmd_sweep(const std::string& config_path) {
  return guarded([&] {
    const ExperimentConfig c = load_config(config_path);
    const std::vector<std::string> methods = c.presets.empty() ? std::vector<std::string>{c.sharing} : c.presets;
    std::vector<std::pair<double, std::size_t>> cells;
    for (double f : c.fractions)
      for (std::size_t r = 0; r < c.repeats; ++r) cells.emplace_back(f, r);

    std::size_t threads = 1;
    if (const char* env = std::getenv("DMTRL_THREADS")) {
      char* end = nullptr;
      const long v = std::strtol(env, &end, 10);
      if (end == env || *end != '\0' || v < 1) throw ConfigError("DMTRL_THREADS", "must be a positive integer");
      threads = static_cast<std::size_t>(v);
    }
    threads = std::min(threads, cells.size());

    const fs::path root(c.output);
    fs::create_directories(root / "cells");
    std::vector<std::string> csv(cells.size());
    std::vector<json> summary(cells.size());
    std::atomic<std::size_t> next{0};
    std::mutex error_mutex;
    std::exception_ptr error;
    auto worker = [&] {
      for (std::size_t k; (k = next++) < cells.size();) {
        try {
          const auto [fraction, repeat] = cells[k];
          auto results = run_cell(c, methods, fraction, repeat);
          json cell = json::array();
          for (const auto& r : results) {
            csv[k] += csv_rows(r);
            write_run(root / "cells" / cell_dir_name(r.method, fraction, repeat), c, r);
            json j = result_json(r);
            j.erase("log");
            cell.push_back(j);
          }
          summary[k] = cell;
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    };
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);

    std::string all = csv_header();
    json runs = json::array();
    for (std::size_t k = 0; k < cells.size(); ++k) {
      all += csv[k];
      for (const auto& r : summary[k]) runs.push_back(r);
    }
    write_text(root / "results.csv", all);
    write_text(root / "sweep.json", json{{"config", to_json(c)}, {"runs", runs}}.dump(2) + "\n");
  });
}

}  // namespace dmtrl
