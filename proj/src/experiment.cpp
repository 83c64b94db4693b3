// Copyright 2026 The PaRT Lab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "part/experiment.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "part/data.hpp"

namespace part {

using nlohmann::json;

std::string to_string(RunMode mode) {
  switch (mode) {
    case RunMode::parallel: return "parallel";
    case RunMode::sequential: return "sequential";
    case RunMode::single: return "single";
  }
  return "?";
}

RunMode run_mode_from_string(const std::string& s) {
  if (s == "parallel") return RunMode::parallel;
  if (s == "sequential") return RunMode::sequential;
  if (s == "single") return RunMode::single;
  throw ConfigError("field 'mode': expected parallel|sequential|single, got '" + s + "'");
}

namespace {

template <class T>
T get_or(const json& obj, const char* key, T fallback, const std::string& where) {
  if (!obj.is_object()) throw ConfigError("field '" + where + "': expected an object");
  const auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return fallback;
  try {
    if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
      if (!it->is_number_integer() || it->get<long long>() < 0) throw ConfigError("");
    } else if constexpr (std::is_same_v<T, double>) {
      if (!it->is_number()) throw ConfigError("");
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!it->is_boolean()) throw ConfigError("");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!it->is_string()) throw ConfigError("");
    }
    return it->get<T>();
  } catch (const std::exception&) {
    const std::string prefix = where.empty() ? "" : where + ".";
    throw ConfigError("field '" + prefix + key + "': wrong type or negative (" + std::string(it->type_name()) + ")");
  }
}

const json& child(const json& obj, const char* key) {
  static const json empty = json::object();
  const auto it = obj.find(key);
  return it == obj.end() || it->is_null() ? empty : *it;
}

void check(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw ConfigError("field '" + field + "': " + what);
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

ExperimentConfig parse_config(const json& doc, const std::filesystem::path& base_dir) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  ExperimentConfig cfg;
  cfg.seed = get_or<std::uint64_t>(doc, "seed", 0, "");
  if (doc.contains("data_seed") && !doc["data_seed"].is_null()) {
    cfg.data_seed = get_or<std::uint64_t>(doc, "data_seed", 0, "");
  }
  cfg.mode = run_mode_from_string(get_or<std::string>(doc, "mode", "parallel", ""));
  cfg.single_task = get_or<std::size_t>(doc, "single_task", 0, "");
  try {
    cfg.norm_mode = norm_mode_from_string(get_or<std::string>(doc, "norm_mode", "per_task", ""));
  } catch (const InputError& e) {
    throw ConfigError(std::string("field 'norm_mode': ") + e.what());
  }

  const json& g = child(doc, "grid");
  cfg.grid.layers = get_or<std::size_t>(g, "layers", cfg.grid.layers, "grid");
  cfg.grid.modules = get_or<std::size_t>(g, "modules", cfg.grid.modules, "grid");
  cfg.grid.d_in = get_or<std::size_t>(g, "d_in", cfg.grid.d_in, "grid");
  cfg.grid.d_hid = get_or<std::size_t>(g, "d_hid", cfg.grid.d_hid, "grid");
  cfg.picks = get_or<std::size_t>(g, "picks", cfg.picks, "grid");
  check(cfg.grid.layers >= 1, "grid.layers", "must be >= 1");
  check(cfg.grid.modules >= 1, "grid.modules", "must be >= 1");
  check(cfg.grid.d_in >= 1 && cfg.grid.d_hid >= 1, "grid.d_in/d_hid", "must be >= 1");
  check(cfg.picks >= 1 && cfg.picks <= cfg.grid.modules, "grid.picks", "need 1 <= picks <= modules");

  const json& t = child(doc, "train");
  cfg.train.epochs = get_or<std::size_t>(t, "epochs", cfg.train.epochs, "train");
  cfg.train.batch_size = get_or<std::size_t>(t, "batch_size", cfg.train.batch_size, "train");
  cfg.train.batch_set_size = get_or<std::size_t>(t, "batch_set_size", cfg.train.batch_set_size, "train");
  cfg.train.lr0 = get_or<double>(t, "lr0", cfg.train.lr0, "train");
  if (t.contains("lr_halve_epochs")) {
    try {
      cfg.train.lr_halve_epochs = t.at("lr_halve_epochs").get<std::vector<std::size_t>>();
    } catch (const json::exception&) {
      throw ConfigError("field 'train.lr_halve_epochs': expected a list of non-negative integers");
    }
  }
  cfg.train.seed = cfg.seed;
  cfg.train.norm_mode = cfg.norm_mode;
  check(cfg.train.lr0 > 0.0 && std::isfinite(cfg.train.lr0), "train.lr0", "must be > 0");
  check(cfg.train.batch_size >= 1, "train.batch_size", "must be >= 1");
  check(cfg.train.batch_set_size >= 1, "train.batch_set_size", "must be >= 1");
  for (std::size_t i = 1; i < cfg.train.lr_halve_epochs.size(); ++i) {
    check(cfg.train.lr_halve_epochs[i] > cfg.train.lr_halve_epochs[i - 1], "train.lr_halve_epochs",
          "must be strictly increasing");
  }

  const auto tasks_it = doc.find("tasks");
  check(tasks_it != doc.end() && tasks_it->is_array() && !tasks_it->empty(), "tasks", "expected a non-empty list");
  for (std::size_t i = 0; i < tasks_it->size(); ++i) {
    const json& entry = (*tasks_it)[i];
    const std::string where = "tasks[" + std::to_string(i) + "]";
    check(entry.is_object(), where, "expected an object");
    const std::size_t repeat = get_or<std::size_t>(entry, "repeat", 1, where);
    check(repeat >= 1, where + ".repeat", "must be >= 1");
    const std::string name = get_or<std::string>(entry, "name", "task" + std::to_string(i), where);
    TaskConfig tc;
    if (entry.contains("synthetic")) {
      const json& s = entry.at("synthetic");
      SyntheticTaskConfig sc;
      sc.classes = get_or<std::size_t>(s, "classes", sc.classes, where + ".synthetic");
      sc.n_per_class = get_or<std::size_t>(s, "n_per_class", sc.n_per_class, where + ".synthetic");
      sc.margin = get_or<double>(s, "margin", sc.margin, where + ".synthetic");
      check(sc.classes >= 2, where + ".synthetic.classes", "must be >= 2");
      check(sc.n_per_class >= 2, where + ".synthetic.n_per_class", "must be >= 2");
      check(sc.margin > 0.0, where + ".synthetic.margin", "must be > 0");
      check(cfg.grid.d_in >= 2, "grid.d_in", "synthetic tasks need d_in >= 2");
      tc.synthetic = sc;
    } else {
      const auto train = get_or<std::string>(entry, "train_csv", "", where);
      const auto val = get_or<std::string>(entry, "val_csv", "", where);
      check(!train.empty() && !val.empty(), where, "needs either 'synthetic' or both 'train_csv' and 'val_csv'");
      tc.train_csv = std::filesystem::path(train).is_absolute() ? std::filesystem::path(train) : base_dir / train;
      tc.val_csv = std::filesystem::path(val).is_absolute() ? std::filesystem::path(val) : base_dir / val;
      check(std::filesystem::exists(tc.train_csv), where + ".train_csv", "file not found: " + tc.train_csv.string());
      check(std::filesystem::exists(tc.val_csv), where + ".val_csv", "file not found: " + tc.val_csv.string());
    }
    for (std::size_t r = 0; r < repeat; ++r) {
      tc.name = repeat == 1 ? name : name + "#" + std::to_string(r);
      cfg.tasks.push_back(tc);
    }
  }
  check(cfg.single_task < cfg.tasks.size(), "single_task", "index out of range");

  cfg.controlled_setup = get_or<std::string>(doc, "controlled_setup", "", "");
  if (!cfg.controlled_setup.empty()) {
    check(cfg.tasks.size() == 2, "controlled_setup", "needs exactly two tasks");
    check(cfg.grid.modules == 2 * cfg.picks, "controlled_setup", "needs grid.modules == 2 * grid.picks");
    try {
      for (std::size_t l : parse_sharing_setup(cfg.controlled_setup))
        check(l < cfg.grid.layers, "controlled_setup", "names a layer beyond grid.layers");
    } catch (const ConfigError&) {
      throw;
    } catch (const InputError& e) {
      throw ConfigError(std::string("field 'controlled_setup': ") + e.what());
    }
  }

  const json& a = child(doc, "analysis");
  cfg.analysis.cka = get_or<bool>(a, "cka", false, "analysis");
  cfg.analysis.sharing_profile = get_or<bool>(a, "sharing_profile", false, "analysis");
  const std::string kernel = get_or<std::string>(a, "kernel", "rbf", "analysis");
  check(kernel == "rbf" || kernel == "linear", "analysis.kernel", "expected rbf|linear");
  const double sigma = get_or<double>(a, "sigma", 0.5, "analysis");
  const bool frac = get_or<bool>(a, "sigma_is_fraction", true, "analysis");
  check(sigma > 0.0, "analysis.sigma", "must be > 0");
  cfg.analysis.kernel = kernel == "rbf" ? Kernel::rbf(sigma, frac) : Kernel::linear();
  cfg.analysis.capture_n = get_or<std::size_t>(a, "capture_n", cfg.analysis.capture_n, "analysis");
  cfg.analysis.task_a = get_or<std::size_t>(a, "task_a", 0, "analysis");
  cfg.analysis.task_b = get_or<std::size_t>(a, "task_b", 1, "analysis");
  cfg.analysis.trials = get_or<std::size_t>(a, "trials", 0, "analysis");
  check(cfg.analysis.capture_n >= 3, "analysis.capture_n", "must be >= 3");
  if (cfg.analysis.cka) {
    check(cfg.analysis.task_a < cfg.tasks.size() && cfg.analysis.task_b < cfg.tasks.size(), "analysis.task_a/task_b",
          "index out of range");
  }

  cfg.output_dir = get_or<std::string>(doc, "output_dir", "out", "");
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(doc, path.parent_path());
}

json config_to_json(const ExperimentConfig& cfg) {
  json tasks = json::array();
  for (const auto& t : cfg.tasks) {
    json e{{"name", t.name}};
    if (t.synthetic) {
      e["synthetic"] = {{"classes", t.synthetic->classes},
                        {"n_per_class", t.synthetic->n_per_class},
                        {"margin", t.synthetic->margin}};
    } else {
      e["train_csv"] = t.train_csv.string();
      e["val_csv"] = t.val_csv.string();
    }
    tasks.push_back(std::move(e));
  }
  const auto& k = cfg.analysis.kernel;
  return json{{"seed", cfg.seed},
              {"data_seed", cfg.effective_data_seed()},
              {"mode", to_string(cfg.mode)},
              {"single_task", cfg.single_task},
              {"norm_mode", to_string(cfg.norm_mode)},
              {"grid",
               {{"layers", cfg.grid.layers},
                {"modules", cfg.grid.modules},
                {"picks", cfg.picks},
                {"d_in", cfg.grid.d_in},
                {"d_hid", cfg.grid.d_hid}}},
              {"train",
               {{"epochs", cfg.train.epochs},
                {"batch_size", cfg.train.batch_size},
                {"batch_set_size", cfg.train.batch_set_size},
                {"lr0", cfg.train.lr0},
                {"lr_halve_epochs", cfg.train.lr_halve_epochs}}},
              {"tasks", tasks},
              {"controlled_setup", cfg.controlled_setup},
              {"analysis",
               {{"cka", cfg.analysis.cka},
                {"sharing_profile", cfg.analysis.sharing_profile},
                {"kernel", k.kind == Kernel::Kind::rbf ? "rbf" : "linear"},
                {"sigma", k.sigma},
                {"sigma_is_fraction", k.sigma_is_fraction},
                {"capture_n", cfg.analysis.capture_n},
                {"task_a", cfg.analysis.task_a},
                {"task_b", cfg.analysis.task_b},
                {"trials", cfg.analysis.trials}}},
              {"output_dir", cfg.output_dir.string()}};
}

std::string config_hash(const ExperimentConfig& cfg) {
  json doc = config_to_json(cfg);
  doc.erase("output_dir");
  const std::string text = doc.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return hex64(h);
}

std::vector<TaskData> build_task_data(const ExperimentConfig& cfg) {
  std::vector<TaskData> data;
  const std::uint64_t seed = cfg.effective_data_seed();
  for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
    const TaskConfig& tc = cfg.tasks[i];
    TaskData td;
    if (tc.synthetic) {
      Rng rng = make_rng(seed, "data", i);
      auto split = gen_synthetic_task(rng, tc.synthetic->classes, tc.synthetic->n_per_class, cfg.grid.d_in,
                                      tc.synthetic->margin, tc.name);
      td.train = std::move(split.train);
      td.val = std::move(split.val);
    } else {
      try {
        td.train = load_csv(tc.train_csv);
        td.val = load_csv(tc.val_csv);
      } catch (const ParseError& e) {
        throw ConfigError("field 'tasks[" + std::to_string(i) + "]': " + e.what());
      }
      const std::string where = "tasks[" + std::to_string(i) + "]";
      check(td.train.dims() == cfg.grid.d_in && td.val.dims() == cfg.grid.d_in, where,
            "CSV feature count differs from grid.d_in");
      check(td.train.classes == td.val.classes, where, "train and val class counts differ");
      td.train.name = tc.name + "/train";
      td.val.name = tc.name + "/val";
    }
    standardize(td.train, td.val);
    data.push_back(std::move(td));
  }
  std::vector<Dataset> trains;
  for (const auto& td : data) trains.push_back(td.train);
  Rng rng = make_rng(seed, "oversample");
  auto padded = oversample_to_equal(trains, rng);
  for (std::size_t i = 0; i < data.size(); ++i) data[i].train = std::move(padded[i]);
  return data;
}

std::vector<Path> config_paths(const ExperimentConfig& cfg) {
  if (!cfg.controlled_setup.empty()) {
    auto [a, b] = build_controlled_paths(cfg.grid.layers, cfg.grid.modules, cfg.picks,
                                         parse_sharing_setup(cfg.controlled_setup));
    return {std::move(a), std::move(b)};
  }
  Rng rng = make_rng(cfg.seed, "paths");
  std::vector<Path> paths;
  for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
    paths.push_back(assign_random_path(cfg.grid.modules, cfg.picks, cfg.grid.layers, rng));
  }
  return paths;
}

namespace {

std::vector<TaskSpec> attach(const ModuleGrid& grid, std::vector<TaskData> data) {
  std::vector<TaskSpec> tasks;
  for (std::size_t i = 0; i < data.size(); ++i) {
    TaskSpec spec = grid.task_spec(i);
    if (spec.classes != data[i].train.classes) {
      throw ConfigError("field 'tasks[" + std::to_string(i) + "]': class count differs from the model's task");
    }
    spec.train_ds = std::make_shared<const Dataset>(std::move(data[i].train));
    spec.val_ds = std::make_shared<const Dataset>(std::move(data[i].val));
    tasks.push_back(std::move(spec));
  }
  return tasks;
}

}  // namespace

Experiment prepare_experiment(const ExperimentConfig& cfg) {
  auto data = build_task_data(cfg);
  Experiment exp{ModuleGrid(cfg.grid, cfg.norm_mode, cfg.seed), {}};
  const auto paths = config_paths(cfg);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const TaskSpec spec = exp.grid.register_task(data[i].train.classes);
    exp.grid.assign_path(spec.id, paths[i]);
  }
  exp.tasks = attach(exp.grid, std::move(data));
  return exp;
}

std::vector<TaskSpec> bind_tasks(const ModuleGrid& grid, const ExperimentConfig& cfg) {
  if (grid.task_count() != cfg.tasks.size()) {
    throw ConfigError("checkpoint holds " + std::to_string(grid.task_count()) + " tasks, config lists " +
                      std::to_string(cfg.tasks.size()));
  }
  if (!(grid.shape() == cfg.grid)) throw ConfigError("checkpoint grid shape differs from config 'grid'");
  return attach(grid, build_task_data(cfg));
}

RunReport run_training(Experiment& exp, const ExperimentConfig& cfg, const FreezeCallback& on_frozen) {
  RunReport report;
  switch (cfg.mode) {
    case RunMode::parallel: report = train_parallel(exp.grid, exp.tasks, cfg.train); break;
    case RunMode::sequential: report = train_sequential(exp.grid, exp.tasks, cfg.train, on_frozen); break;
    case RunMode::single: report = train_single(exp.grid, exp.tasks, cfg.single_task, cfg.train); break;
  }
  report.config_hash = config_hash(cfg);
  return report;
}

json report_to_json(const RunReport& r) {
  json tasks = json::array();
  for (const auto& t : r.tasks) tasks.push_back({{"id", t.id}, {"c", t.classes}, {"slice", {t.slice.start, t.slice.end}}});
  json epochs = json::array();
  for (const auto& e : r.epochs) {
    json per = json::array();
    for (const auto& p : e.per_task) {
      per.push_back({{"loss", p.loss ? json(*p.loss) : json(nullptr)}, {"val_acc", p.val_acc}});
    }
    epochs.push_back({{"epoch", e.epoch}, {"lr", e.lr}, {"per_task", per}});
  }
  json final_acc = json::array();
  for (std::size_t i = 0; i < r.final_acc.size(); ++i) final_acc.push_back({{"task", i}, {"val_acc", r.final_acc[i]}});
  return json{{"config_hash", r.config_hash}, {"seed", r.seed},        {"mode", r.mode},
              {"tasks", tasks},               {"epochs", epochs},      {"final", final_acc},
              {"wallclock_s", r.wallclock_s}};
}

RunReport report_from_json(const json& doc) {
  try {
    RunReport r;
    r.config_hash = doc.at("config_hash").get<std::string>();
    r.seed = doc.at("seed").get<std::uint64_t>();
    r.mode = doc.at("mode").get<std::string>();
    for (const auto& t : doc.at("tasks")) {
      r.tasks.push_back(TaskSummary{t.at("id").get<std::size_t>(), t.at("c").get<std::size_t>(),
                                    Slice{t.at("slice").at(0).get<std::size_t>(), t.at("slice").at(1).get<std::size_t>()}});
    }
    for (const auto& e : doc.at("epochs")) {
      EpochRecord rec{e.at("epoch").get<std::size_t>(), e.at("lr").get<double>(), {}};
      for (const auto& p : e.at("per_task")) {
        TaskEpochStats s;
        if (!p.at("loss").is_null()) s.loss = p.at("loss").get<double>();
        s.val_acc = p.at("val_acc").get<double>();
        rec.per_task.push_back(s);
      }
      r.epochs.push_back(std::move(rec));
    }
    for (const auto& f : doc.at("final")) r.final_acc.push_back(f.at("val_acc").get<double>());
    r.wallclock_s = doc.at("wallclock_s").get<double>();
    return r;
  } catch (const json::exception& e) {
    throw ParseError(std::string("report.json: ") + e.what());
  }
}

Comparison compare_reports(const RunReport& a, const RunReport& b) {
  if (a.tasks.size() != b.tasks.size()) throw InputError("compare: reports cover different task lists");
  for (std::size_t i = 0; i < a.tasks.size(); ++i) {
    const auto& x = a.tasks[i];
    const auto& y = b.tasks[i];
    if (x.id != y.id || x.classes != y.classes || x.slice != y.slice) {
      throw InputError("compare: task " + std::to_string(i) + " differs between reports");
    }
  }
  if (a.final_acc.size() != a.tasks.size() || b.final_acc.size() != b.tasks.size()) {
    throw InputError("compare: report lacks final accuracies");
  }
  Comparison c;
  for (std::size_t i = 0; i < a.tasks.size(); ++i) {
    c.per_task.push_back(TaskDelta{i, a.final_acc[i], b.final_acc[i], a.final_acc[i] - b.final_acc[i]});
  }
  c.mean_a = a.mean_final_acc();
  c.mean_b = b.mean_final_acc();
  c.mean_delta = c.mean_a - c.mean_b;
  return c;
}

json to_json(const Comparison& c) {
  json rows = json::array();
  for (const auto& d : c.per_task) rows.push_back({{"task", d.task}, {"a", d.acc_a}, {"b", d.acc_b}, {"delta", d.delta}});
  return {{"per_task", rows}, {"mean_a", c.mean_a}, {"mean_b", c.mean_b}, {"mean_delta", c.mean_delta}};
}

std::string format_comparison(const Comparison& c) {
  std::ostringstream os;
  char line[128];
  os << "task        A        B    delta\n";
  for (const auto& d : c.per_task) {
    std::snprintf(line, sizeof line, "%4zu  %7.4f  %7.4f  %+7.4f\n", d.task, d.acc_a, d.acc_b, d.delta);
    os << line;
  }
  std::snprintf(line, sizeof line, "mean  %7.4f  %7.4f  %+7.4f\n", c.mean_a, c.mean_b, c.mean_delta);
  os << line;
  return os.str();
}

AnalysisArtifacts analyze_grids(const std::vector<const ModuleGrid*>& grids, const ExperimentConfig& cfg) {
  if (grids.empty()) throw InputError("analyze: no model given");
  AnalysisArtifacts art;
  if (cfg.analysis.cka) {
    const std::string setup = cfg.controlled_setup.empty() ? "random" : cfg.controlled_setup;
    std::vector<CkaReport> reports;
    for (const ModuleGrid* grid : grids) {
      const auto tasks = bind_tasks(*grid, cfg);
      const TaskSpec& ta = tasks.at(cfg.analysis.task_a);
      const TaskSpec& tb = tasks.at(cfg.analysis.task_b);
      Rng rng = make_rng(cfg.effective_data_seed(), "capture");
      const Dataset sa = balanced_sample(*ta.val_ds, cfg.analysis.capture_n, rng);
      const Dataset sb = balanced_sample(*tb.val_ds, cfg.analysis.capture_n, rng);
      const auto acts_a = capture_activations(*grid, ta, sa, cfg.analysis.capture_n);
      const auto acts_b = capture_activations(*grid, tb, sb, cfg.analysis.capture_n);
      reports.push_back(layerwise_cka_report(acts_a, acts_b, cfg.analysis.kernel, setup));
    }
    art.cka = average_reports(reports);
  }
  if (cfg.analysis.sharing_profile) {
    std::vector<Path> paths;
    for (const auto& e : grids.front()->tasks()) paths.push_back(e.path);
    art.sharing = sharing_profile(paths, grids.front()->shape().modules, grids.front()->shape().layers);
  }
  return art;
}

void write_analysis(const AnalysisArtifacts& art, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  if (art.cka) {
    std::ofstream(dir / "cka_report.json") << to_json(*art.cka).dump(2) << '\n';
    for (std::size_t l = 0; l < art.cka->module_pairs.size(); ++l) {
      write_heatmap_csv(*art.cka, l, dir / ("heatmap_layer" + std::to_string(l + 1) + ".csv"));
    }
  }
  if (art.sharing) std::ofstream(dir / "sharing_profile.json") << to_json(*art.sharing).dump(2) << '\n';
}

}  // namespace part
