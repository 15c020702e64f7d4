// Command-line laboratory for multi-residual networks: training, path
// analysis, lesioning and parallelism simulation with reproducible outputs.

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mrn/data.hpp"
#include "mrn/kv.hpp"
#include "mrn/model.hpp"
#include "mrn/parallel_sim.hpp"
#include "mrn/path_analysis.hpp"
#include "mrn/trainer.hpp"

namespace fs = std::filesystem;
using namespace mrn;

namespace {

constexpr const char* kVersion = "0.1.0";

std::string default_out_dir() {
  const char* env = std::getenv("MRN_OUT_DIR");
  return env != nullptr && *env != '\0' ? env : ".";
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

class Manifest {
 public:
  Manifest(std::string subcommand, fs::path out_dir)
      : out_dir_(std::move(out_dir)), start_(std::chrono::steady_clock::now()) {
    kv_["subcommand"] = std::move(subcommand);
    kv_["version"] = kVersion;
    fs::create_directories(out_dir_);
  }

  void config(const std::string& key, const std::string& value) { kv_["config." + key] = value; }
  void config(const std::string& key, double value) { config(key, fmt(value)); }
  void config(const std::string& key, int64_t value) { config(key, std::to_string(value)); }

  fs::path artifact(const std::string& name) {
    artifacts_.push_back(name);
    return out_dir_ / name;
  }

  void write() {
    std::string list;
    for (size_t i = 0; i < artifacts_.size(); ++i) {
      if (i) list += ",";
      list += artifacts_[i];
    }
    kv_["artifacts"] = list;
    kv_["wall_time_seconds"] =
        fmt(std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count());
    write_kv_file(kv_, (out_dir_ / "manifest.kv").string());
  }

 private:
  fs::path out_dir_;
  std::map<std::string, std::string> kv_;
  std::vector<std::string> artifacts_;
  std::chrono::steady_clock::time_point start_;
};

struct DatasetFlags {
  std::string dataset = "synth";
  std::string data_dir;
  int synth_samples = 4000;
  int synth_test_samples = 1000;
  int synth_classes = 2;
  int synth_size = 16;
  double synth_noise = 0.35;
  uint64_t synth_seed = 11;
};

void add_dataset_flags(CLI::App* cmd, DatasetFlags& f) {
  cmd->add_option("--dataset", f.dataset, "Dataset kind: synth or cifar")
      ->check(CLI::IsMember({"synth", "cifar"}));
  cmd->add_option("--data-dir", f.data_dir, "Directory with the CIFAR-10 binary batches");
  cmd->add_option("--synth-samples", f.synth_samples, "Synthetic training samples");
  cmd->add_option("--synth-test-samples", f.synth_test_samples, "Synthetic test samples");
  cmd->add_option("--synth-classes", f.synth_classes, "Synthetic class count");
  cmd->add_option("--synth-size", f.synth_size, "Synthetic image side length");
  cmd->add_option("--synth-noise", f.synth_noise, "Synthetic noise level");
  cmd->add_option("--synth-seed", f.synth_seed, "Synthetic generator seed");
}

void manifest_dataset(Manifest& m, const DatasetFlags& f) {
  m.config("dataset", f.dataset);
  if (f.dataset == "cifar") {
    m.config("data_dir", f.data_dir);
  } else {
    m.config("synth_samples", static_cast<int64_t>(f.synth_samples));
    m.config("synth_test_samples", static_cast<int64_t>(f.synth_test_samples));
    m.config("synth_classes", static_cast<int64_t>(f.synth_classes));
    m.config("synth_size", static_cast<int64_t>(f.synth_size));
    m.config("synth_noise", f.synth_noise);
    m.config("synth_seed", static_cast<int64_t>(f.synth_seed));
  }
}

std::pair<Dataset, Dataset> load_datasets(const DatasetFlags& f) {
  if (f.dataset == "cifar") {
    if (f.data_dir.empty()) throw std::runtime_error("--data-dir is required for the cifar dataset");
    Dataset train = load_cifar10(f.data_dir, "train");
    Dataset test = load_cifar10(f.data_dir, "test");
    return {std::move(train), std::move(test)};
  }
  Dataset train = synth_dataset(f.synth_seed, f.synth_samples, f.synth_classes, f.synth_size,
                                f.synth_noise);
  Dataset test = synth_dataset(f.synth_seed + 1, f.synth_test_samples, f.synth_classes,
                               f.synth_size, f.synth_noise);
  test.split = "test";
  return {std::move(train), std::move(test)};
}

Dataset eval_dataset_for_checkpoint(const DatasetFlags& f, const Network& net,
                                    const std::map<std::string, std::vector<double>>& extra) {
  Dataset test;
  if (f.dataset == "cifar") {
    if (f.data_dir.empty()) throw std::runtime_error("--data-dir is required for the cifar dataset");
    test = load_cifar10(f.data_dir, "test");
  } else {
    test = synth_dataset(f.synth_seed + 1, f.synth_test_samples, net.config.num_classes,
                         net.config.input_shape[1], f.synth_noise);
    test.split = "test";
  }
  // normalization travels with the checkpoint so evaluation is self-contained
  auto mean_it = extra.find("data.mean");
  auto std_it = extra.find("data.std");
  if (mean_it != extra.end() && std_it != extra.end() && mean_it->second.size() == 3) {
    for (int c = 0; c < 3; ++c) {
      test.mean[static_cast<size_t>(c)] = mean_it->second[static_cast<size_t>(c)];
      test.stddev[static_cast<size_t>(c)] = std_it->second[static_cast<size_t>(c)];
    }
    test.has_stats = true;
  }
  return test;
}

BlockKind parse_block_kind(const std::string& name) {
  if (name == "basic") return BlockKind::Basic;
  if (name == "bottleneck") return BlockKind::Bottleneck;
  throw std::runtime_error("unknown block kind '" + name + "' (expected basic|bottleneck)");
}

double kv_double(const std::map<std::string, std::string>& kv, const std::string& key,
                 double fallback) {
  auto it = kv.find(key);
  return it == kv.end() ? fallback : std::stod(it->second);
}

sim::CostModel cost_model_from_file(const std::string& path) {
  auto kv = read_kv_file(path);
  sim::CostModel m;
  m.t_fn = kv_double(kv, "t_fn", 0.0);
  m.t_fixed = kv_double(kv, "t_fixed", 0.0);
  m.latency = kv_double(kv, "latency", 0.0);
  m.bandwidth = kv_double(kv, "bandwidth", 16e9);
  m.warp = static_cast<long>(kv_double(kv, "warp", 32));
  return m;
}

void write_cost_model(const sim::CostModel& m, const std::string& path) {
  std::map<std::string, std::string> kv;
  kv["t_fn"] = fmt(m.t_fn);
  kv["t_fixed"] = fmt(m.t_fixed);
  kv["latency"] = fmt(m.latency);
  kv["bandwidth"] = fmt(m.bandwidth);
  kv["warp"] = std::to_string(m.warp);
  write_kv_file(kv, path);
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

// columns: name,strategy,n_blocks,k,batch,workers,act_bytes,model_bytes[,measured_seconds]
std::vector<sim::Observation> read_observations_csv(const std::string& path, bool need_measured) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open observations file: " + path);
  std::vector<sim::Observation> out;
  std::string line;
  bool header_seen = false;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      header_seen = true;  // header row
      continue;
    }
    auto cells = split_csv_line(line);
    if (cells.size() < (need_measured ? 9u : 8u)) {
      throw std::runtime_error(path + ": row with too few columns: " + line);
    }
    sim::Observation o;
    o.scenario.name = cells[0];
    o.scenario.strategy = sim::strategy_from_name(cells[1]);
    o.scenario.n_blocks = std::stoi(cells[2]);
    o.scenario.k = std::stoi(cells[3]);
    o.scenario.batch_size = std::stoi(cells[4]);
    o.scenario.workers = std::stoi(cells[5]);
    o.scenario.act_bytes = std::stod(cells[6]);
    o.scenario.model_bytes = std::stod(cells[7]);
    if (cells.size() >= 9 && !cells[8].empty()) o.measured_seconds = std::stod(cells[8]);
    out.push_back(std::move(o));
  }
  if (out.empty()) throw std::runtime_error(path + " holds no data rows");
  return out;
}

int run_train(const std::string& out_dir, int depth, int k, int w, const std::string& block,
              int classes, bool skipless, const DatasetFlags& data_flags, HyperParams hyper) {
  Manifest manifest("train", out_dir);
  auto [train_set, test_set] = load_datasets(data_flags);

  NetworkConfig cfg = NetworkConfig::from_depth(
      depth, k, w, parse_block_kind(block), data_flags.dataset == "cifar" ? 10 : classes,
      {3, static_cast<int>(train_set.images[0].pixels.dim(1)),
       static_cast<int>(train_set.images[0].pixels.dim(2))});
  cfg.skip_connections = !skipless;
  Network net = build_network(cfg, hyper.seed);

  manifest.config("depth", static_cast<int64_t>(depth));
  manifest.config("k", static_cast<int64_t>(k));
  manifest.config("w", static_cast<int64_t>(w));
  manifest.config("block", block);
  manifest.config("classes", static_cast<int64_t>(cfg.num_classes));
  manifest.config("skip_connections", cfg.skip_connections ? "true" : "false");
  manifest.config("epochs", static_cast<int64_t>(hyper.epochs));
  manifest.config("batch_size", static_cast<int64_t>(hyper.batch_size));
  manifest.config("lr", hyper.lr);
  manifest.config("momentum", hyper.momentum);
  manifest.config("weight_decay", hyper.weight_decay);
  manifest.config("keep_p", hyper.function_keep_p);
  manifest.config("augment", hyper.augment ? "true" : "false");
  manifest.config("stop_at_test_err", hyper.stop_at_test_err);
  manifest.config("seed", static_cast<int64_t>(hyper.seed));
  manifest_dataset(manifest, data_flags);

  TrainLog log = train(net, train_set, test_set, hyper);

  std::map<std::string, std::vector<double>> extra;
  extra["data.mean"] = {train_set.mean.begin(), train_set.mean.end()};
  extra["data.std"] = {train_set.stddev.begin(), train_set.stddev.end()};
  save_checkpoint(net, manifest.artifact("checkpoint.mrn").string(), extra);
  write_train_log_csv(log, manifest.artifact("train_log.csv").string());
  manifest.write();

  if (!log.epochs.empty()) {
    std::cout << "final train_err " << log.epochs.back().train_err << ", test_err "
              << log.epochs.back().test_err << "\n";
  }
  std::cout << "parameters: " << count_parameters(net) << "\n";
  return 0;
}

int run_evaluate(const std::string& out_dir, const std::string& checkpoint,
                 const DatasetFlags& data_flags) {
  Manifest manifest("evaluate", out_dir);
  manifest.config("checkpoint", checkpoint);
  manifest_dataset(manifest, data_flags);
  std::map<std::string, std::vector<double>> extra;
  Network net = load_checkpoint(checkpoint, &extra);
  Dataset test = eval_dataset_for_checkpoint(data_flags, net, extra);
  const double err = evaluate(net, test);
  std::ofstream os(manifest.artifact("eval.csv"));
  os << "samples,error_rate\n" << test.images.size() << "," << fmt(err) << "\n";
  manifest.write();
  std::cout << "error rate " << err << "\n";
  return 0;
}

int run_analyze(const std::string& out_dir, int n, int k, double r, double p) {
  Manifest manifest("analyze", out_dir);
  manifest.config("n", static_cast<int64_t>(n));
  manifest.config("k", static_cast<int64_t>(k));
  manifest.config("r", r);
  manifest.config("p", p);
  if (!(p > 0.0) || !(p < 1.0)) {
    throw std::runtime_error("coverage p must lie in (0,1), got " + std::to_string(p));
  }

  paths::ContributionCurve curve = paths::gradient_contribution(n, k, r);
  paths::EffectiveRange range = paths::effective_range(curve, p);

  {
    std::ofstream os(manifest.artifact("path_distribution.csv"));
    os << "depth,count,weight,normalized\n";
    for (size_t d = 0; d < curve.weights.size(); ++d) {
      mpz_class count = paths::path_depth_distribution(n, k).counts[d];
      os << d << "," << count.get_str() << "," << fmt(mpq_class(curve.weights[d]).get_d()) << ","
         << fmt(curve.normalized[d]) << "\n";
    }
  }
  {
    std::ofstream os(manifest.artifact("effective_range.csv"));
    os << "a,b,coverage,p,mode,mean,multiplicity\n";
    os << range.a << "," << range.b << "," << fmt(range.coverage) << "," << fmt(p) << ","
       << curve.mode() << "," << fmt(curve.mean()) << "," << paths::multiplicity(n, k).get_str()
       << "\n";
  }
  manifest.write();
  std::cout << "effective range [" << range.a << "," << range.b << "] covers "
            << range.coverage << "\n";
  return 0;
}

int run_compare_scaling(const std::string& out_dir, int n, int c, double r, double p) {
  Manifest manifest("compare-scaling", out_dir);
  manifest.config("n", static_cast<int64_t>(n));
  manifest.config("c", static_cast<int64_t>(c));
  manifest.config("r", r);
  manifest.config("p", p);
  paths::ScalingReport rep = paths::compare_scaling(n, c, r, p);
  std::ofstream os(manifest.artifact("scaling_report.csv"));
  os << "n,c,r,p,base_a,base_b,deep_a,deep_b,wide_a,wide_b,deep_over_cb,sublinear\n";
  os << n << "," << c << "," << fmt(r) << "," << fmt(p) << "," << rep.base.a << "," << rep.base.b
     << "," << rep.deeper.a << "," << rep.deeper.b << "," << rep.wider.a << "," << rep.wider.b
     << "," << fmt(rep.deep_over_cb) << "," << (rep.sublinear ? 1 : 0) << "\n";
  manifest.write();
  std::cout << "b(cn,1)=" << rep.deeper.b << " vs c*b(n,1)=" << c * rep.base.b
            << (rep.sublinear ? " (sublinear)" : "") << "\n";
  return 0;
}

int run_lesion(const std::string& out_dir, const std::string& checkpoint,
               const DatasetFlags& data_flags) {
  Manifest manifest("lesion", out_dir);
  manifest.config("checkpoint", checkpoint);
  manifest_dataset(manifest, data_flags);
  std::map<std::string, std::vector<double>> extra;
  Network net = load_checkpoint(checkpoint, &extra);
  Dataset test = eval_dataset_for_checkpoint(data_flags, net, extra);
  auto rows = paths::lesion_sweep(net, test);
  std::ofstream os(manifest.artifact("lesion.csv"));
  os << "block_index,baseline_err,lesioned_err,delta\n";
  for (const auto& row : rows) {
    os << row.block_index << "," << fmt(row.baseline_err) << "," << fmt(row.lesioned_err) << ","
       << fmt(row.delta) << "\n";
  }
  manifest.write();
  std::cout << rows.size() - 1 << " blocks swept, baseline error " << rows[0].baseline_err << "\n";
  return 0;
}

int run_path_gradient(const std::string& out_dir, const std::string& checkpoint, bool toy,
                      int toy_blocks, int toy_k, double toy_factor, int max_depth, int samples,
                      uint64_t seed, const DatasetFlags& data_flags) {
  Manifest manifest("path-gradient", out_dir);
  manifest.config("max_depth", static_cast<int64_t>(max_depth));
  manifest.config("samples", static_cast<int64_t>(samples));
  manifest.config("seed", static_cast<int64_t>(seed));
  manifest_dataset(manifest, data_flags);

  Network net;
  Dataset data;
  std::map<std::string, std::vector<double>> extra;
  if (toy) {
    manifest.config("toy_blocks", static_cast<int64_t>(toy_blocks));
    manifest.config("toy_k", static_cast<int64_t>(toy_k));
    manifest.config("toy_factor", toy_factor);
    net = build_linear_chain_network(toy_blocks, toy_k, toy_factor, 3, 4, 2, seed);
    data = synth_dataset(data_flags.synth_seed, 16, 2, 4, data_flags.synth_noise);
  } else {
    if (checkpoint.empty()) throw std::runtime_error("path-gradient needs --checkpoint or --toy");
    manifest.config("checkpoint", checkpoint);
    net = load_checkpoint(checkpoint, &extra);
    data = eval_dataset_for_checkpoint(data_flags, net, extra);
  }

  std::mt19937_64 rng(seed);
  std::ofstream os(manifest.artifact("path_gradient.csv"));
  os << "depth,mean_norm,std_norm,samples\n";
  for (int d = 0; d <= max_depth; ++d) {
    paths::PathGradientStats s = paths::empirical_path_gradient(net, data, d, samples, rng);
    os << d << "," << fmt(s.mean_norm) << "," << fmt(s.std_norm) << "," << s.samples << "\n";
  }
  std::mt19937_64 fit_rng(seed);
  const double decay = paths::estimate_decay(net, data, max_depth, samples, fit_rng);
  std::map<std::string, std::string> kv;
  kv["decay_estimate"] = fmt(decay);
  write_kv_file(kv, manifest.artifact("decay_fit.kv").string());
  manifest.write();
  std::cout << "fitted per-function decay " << decay << "\n";
  return 0;
}

int run_simulate(const std::string& out_dir, const std::string& scenario_file,
                 const std::string& cost_file) {
  Manifest manifest("simulate", out_dir);
  manifest.config("scenario", scenario_file);
  manifest.config("cost_model", cost_file);
  auto kv = read_kv_file(scenario_file);
  sim::SimScenario s;
  s.name = kv.count("name") ? kv.at("name") : "scenario";
  s.strategy = sim::strategy_from_name(kv.at("strategy"));
  s.n_blocks = static_cast<int>(kv_double(kv, "n_blocks", 1));
  s.k = static_cast<int>(kv_double(kv, "k", 1));
  s.batch_size = static_cast<int>(kv_double(kv, "batch", 1));
  s.workers = static_cast<int>(kv_double(kv, "workers", 1));
  s.act_bytes = kv_double(kv, "act_bytes", 0.0);
  s.model_bytes = kv_double(kv, "model_bytes", 0.0);
  sim::CostModel m = cost_model_from_file(cost_file);
  sim::SimResult r = sim::simulate_step(s, m);
  std::ofstream os(manifest.artifact("sim_result.csv"));
  os << "name,strategy,n_blocks,k,batch,workers,step_time,compute,transfer,fixed\n";
  os << s.name << "," << sim::strategy_name(s.strategy) << "," << s.n_blocks << "," << s.k << ","
     << s.batch_size << "," << s.workers << "," << fmt(r.step_time) << "," << fmt(r.compute) << ","
     << fmt(r.transfer) << "," << fmt(r.fixed) << "\n";
  manifest.write();
  std::cout << "step time " << r.step_time << " s (compute " << r.compute << ", transfer "
            << r.transfer << ", fixed " << r.fixed << ")\n";
  return 0;
}

int run_calibrate(const std::string& out_dir, const std::string& observations_file, long warp) {
  Manifest manifest("calibrate", out_dir);
  manifest.config("observations", observations_file);
  manifest.config("warp", static_cast<int64_t>(warp));
  auto obs = read_observations_csv(observations_file, true);
  sim::CostModel initial;
  initial.warp = warp;
  sim::CostModel fitted = sim::calibrate(obs, initial);
  write_cost_model(fitted, manifest.artifact("cost_model.kv").string());
  std::ofstream os(manifest.artifact("calibration_report.csv"));
  os << "name,measured_seconds,predicted_seconds,residual_pct\n";
  for (const auto& o : obs) {
    const double pred = sim::simulate_step(o.scenario, fitted).step_time;
    os << o.scenario.name << "," << fmt(o.measured_seconds) << "," << fmt(pred) << ","
       << fmt(100.0 * (pred - o.measured_seconds) / o.measured_seconds) << "\n";
  }
  manifest.write();
  std::cout << "fitted: t_fn " << fitted.t_fn << " s, t_fixed " << fitted.t_fixed
            << " s, latency " << fitted.latency << " s, bandwidth " << fitted.bandwidth
            << " B/s\n";
  return 0;
}

int run_speedup_table(const std::string& out_dir, const std::string& scenarios_file,
                      const std::string& cost_file) {
  Manifest manifest("speedup-table", out_dir);
  manifest.config("scenarios", scenarios_file);
  manifest.config("cost_model", cost_file);
  auto obs = read_observations_csv(scenarios_file, false);
  std::vector<sim::SimScenario> scenarios;
  for (const auto& o : obs) scenarios.push_back(o.scenario);
  sim::CostModel m = cost_model_from_file(cost_file);
  auto rows = sim::speedup_table(scenarios, m);

  std::ofstream os(manifest.artifact("speedup.csv"));
  os << "deep_name,deep_blocks,multi_name,multi_blocks,k,batch,deep_time,multi_time,speedup_pct\n";
  for (const auto& row : rows) {
    os << row.deep.name << "," << row.deep.n_blocks << "," << row.multi.name << ","
       << row.multi.n_blocks << "," << row.multi.k << "," << row.multi.batch_size << ","
       << fmt(row.deep_time) << "," << fmt(row.multi_time) << "," << fmt(row.speedup_pct) << "\n";
  }
  std::ofstream md(manifest.artifact("speedup.md"));
  md << "| deep blocks | k | time (s) | multi blocks | k | time (s) | batch | speed up |\n";
  md << "|---|---|---|---|---|---|---|---|\n";
  char buf[256];
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof(buf), "| %d | %d | %.4f | %d | %d | %.4f | %d | %s |\n",
                  row.deep.n_blocks, row.deep.k, row.deep_time, row.multi.n_blocks, row.multi.k,
                  row.multi_time, row.multi.batch_size,
                  row.speedup_pct <= 0.5 ? "-" : (std::to_string(static_cast<int>(std::lround(row.speedup_pct))) + "%").c_str());
    md << buf;
  }
  manifest.write();
  std::cout << rows.size() << " pairs written\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-residual network laboratory"};
  app.require_subcommand(1);

  std::string out_dir = default_out_dir();
  app.add_option("--out", out_dir, "Output directory (default: $MRN_OUT_DIR or .)")
      ->envname("MRN_OUT_DIR");

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a network and write a checkpoint");
  int depth = 14, k = 1, w = 1, classes = 2;
  std::string block = "basic";
  bool skipless = false;
  DatasetFlags train_data;
  HyperParams hyper;
  hyper.batch_size = 64;
  hyper.epochs = 10;
  bool no_augment = false;
  train_cmd->add_option("--depth", depth, "Reported depth (6n+2 basic, 9n+2 bottleneck)");
  train_cmd->add_option("--k", k, "Residual functions per block");
  train_cmd->add_option("--w", w, "Widening factor");
  train_cmd->add_option("--block", block, "Block kind")->check(CLI::IsMember({"basic", "bottleneck"}));
  train_cmd->add_option("--classes", classes, "Class count for synthetic data");
  train_cmd->add_flag("--skipless", skipless, "Build the plain control network without skips");
  train_cmd->add_option("--epochs", hyper.epochs, "Training epochs");
  train_cmd->add_option("--batch", hyper.batch_size, "Mini-batch size");
  train_cmd->add_option("--lr", hyper.lr, "Initial learning rate");
  train_cmd->add_option("--momentum", hyper.momentum, "SGD momentum");
  train_cmd->add_option("--weight-decay", hyper.weight_decay, "Weight decay");
  train_cmd->add_option("--keep-p", hyper.function_keep_p,
                        "Per-function keep probability for sampled configurations");
  train_cmd->add_flag("--no-augment", no_augment, "Disable flip/translation augmentation");
  train_cmd->add_option("--stop-at-test-err", hyper.stop_at_test_err,
                        "Stop once the test error reaches this value");
  train_cmd->add_option("--seed", hyper.seed, "Run seed");
  add_dataset_flags(train_cmd, train_data);

  // evaluate
  auto* eval_cmd = app.add_subcommand("evaluate", "Evaluate a checkpoint");
  std::string checkpoint;
  DatasetFlags eval_data;
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint path")->required();
  add_dataset_flags(eval_cmd, eval_data);

  // analyze
  auto* analyze_cmd = app.add_subcommand("analyze", "Path distribution and effective range");
  int an_n = 10, an_k = 1;
  double an_r = 0.5, an_p = 0.95;
  analyze_cmd->add_option("--n", an_n, "Residual blocks");
  analyze_cmd->add_option("--k", an_k, "Functions per block");
  analyze_cmd->add_option("--r", an_r, "Per-function gradient decay in (0,1]");
  analyze_cmd->add_option("--p", an_p, "Coverage fraction in (0,1)");

  // compare-scaling
  auto* scale_cmd = app.add_subcommand("compare-scaling", "Deepening versus widening ranges");
  int sc_n = 20, sc_c = 2;
  double sc_r = 0.5, sc_p = 0.95;
  scale_cmd->add_option("--n", sc_n, "Baseline block count");
  scale_cmd->add_option("--c", sc_c, "Scale factor");
  scale_cmd->add_option("--r", sc_r, "Per-function gradient decay in (0,1]");
  scale_cmd->add_option("--p", sc_p, "Coverage fraction in (0,1)");

  // lesion
  auto* lesion_cmd = app.add_subcommand("lesion", "Per-block lesion sweep of a checkpoint");
  std::string lesion_checkpoint;
  DatasetFlags lesion_data;
  lesion_cmd->add_option("--checkpoint", lesion_checkpoint, "Checkpoint path")->required();
  add_dataset_flags(lesion_cmd, lesion_data);

  // path-gradient
  auto* pg_cmd = app.add_subcommand("path-gradient", "Per-depth gradient norms of sampled paths");
  std::string pg_checkpoint;
  bool pg_toy = false;
  int pg_toy_blocks = 10, pg_toy_k = 1, pg_max_depth = 8, pg_samples = 16;
  double pg_toy_factor = 0.5;
  uint64_t pg_seed = 1;
  DatasetFlags pg_data;
  pg_cmd->add_option("--checkpoint", pg_checkpoint, "Checkpoint path");
  pg_cmd->add_flag("--toy", pg_toy, "Use the linear halving-chain network");
  pg_cmd->add_option("--toy-blocks", pg_toy_blocks, "Toy chain length");
  pg_cmd->add_option("--toy-k", pg_toy_k, "Toy functions per block");
  pg_cmd->add_option("--toy-factor", pg_toy_factor, "Toy per-function scale");
  pg_cmd->add_option("--max-depth", pg_max_depth, "Largest path depth to sample");
  pg_cmd->add_option("--samples", pg_samples, "Sampled paths per depth");
  pg_cmd->add_option("--seed", pg_seed, "Sampling seed");
  add_dataset_flags(pg_cmd, pg_data);

  // simulate
  auto* sim_cmd = app.add_subcommand("simulate", "Analytic step-time for one scenario");
  std::string scenario_file, cost_file;
  sim_cmd->add_option("--scenario", scenario_file, "Scenario key=value file")->required();
  sim_cmd->add_option("--cost-model", cost_file, "Cost model key=value file")->required();

  // calibrate
  auto* cal_cmd = app.add_subcommand("calibrate", "Fit the cost model to measured step times");
  std::string observations_file;
  long cal_warp = 32;
  cal_cmd->add_option("--observations", observations_file, "Observations CSV")->required();
  cal_cmd->add_option("--warp", cal_warp, "Thread quantum used by the fitted model");

  // speedup-table
  auto* spd_cmd = app.add_subcommand("speedup-table", "Paired deep/multi speedup table");
  std::string spd_scenarios, spd_cost;
  spd_cmd->add_option("--scenarios", spd_scenarios, "Scenario CSV (observation columns)")->required();
  spd_cmd->add_option("--cost-model", spd_cost, "Cost model key=value file")->required();

  for (CLI::App* sub : {train_cmd, eval_cmd, analyze_cmd, scale_cmd, lesion_cmd, pg_cmd, sim_cmd,
                        cal_cmd, spd_cmd}) {
    // explicit flags take precedence over config-file keys
    sub->set_config("--config", "", "Read options from a key=value file");
  }

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) {
      hyper.augment = !no_augment;
      return run_train(out_dir, depth, k, w, block, classes, skipless, train_data, hyper);
    }
    if (*eval_cmd) return run_evaluate(out_dir, checkpoint, eval_data);
    if (*analyze_cmd) return run_analyze(out_dir, an_n, an_k, an_r, an_p);
    if (*scale_cmd) return run_compare_scaling(out_dir, sc_n, sc_c, sc_r, sc_p);
    if (*lesion_cmd) return run_lesion(out_dir, lesion_checkpoint, lesion_data);
    if (*pg_cmd) {
      return run_path_gradient(out_dir, pg_checkpoint, pg_toy, pg_toy_blocks, pg_toy_k,
                               pg_toy_factor, pg_max_depth, pg_samples, pg_seed, pg_data);
    }
    if (*sim_cmd) return run_simulate(out_dir, scenario_file, cost_file);
    if (*cal_cmd) return run_calibrate(out_dir, observations_file, cal_warp);
    if (*spd_cmd) return run_speedup_table(out_dir, spd_scenarios, spd_cost);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
