#include "maxprune/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "maxprune/dataio.hpp"
#include "maxprune/errors.hpp"
#include "maxprune/metrics.hpp"
#include "maxprune/persist.hpp"
#include "maxprune/pruning.hpp"

namespace maxprune {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Raised for problems with the invocation itself (exit status 2).
class UsageError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "usage"; }
};

// The double nearest to a float's shortest decimal form, so 0.01f is echoed
// as 0.01 rather than 0.009999999776482582.
double decimal(float v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::strtod(std::string(buf, res.ptr).c_str(), nullptr);
}

json config_json(const RunConfig& c) {
  return {{"variant", to_string(c.variant)},
          {"fc_size", c.fc_size},
          {"k", c.k},
          {"conv1", c.conv1},
          {"conv2", c.conv2},
          {"data_dir", c.data_dir},
          {"output_dir", c.output_dir},
          {"validation", c.validation},
          {"train_limit", c.train_limit},
          {"test_limit", c.test_limit},
          {"base_lr", decimal(c.train.base_lr)},
          {"momentum", decimal(c.train.momentum)},
          {"weight_decay", decimal(c.train.weight_decay)},
          {"lr_gamma", decimal(c.train.lr_gamma)},
          {"lr_power", decimal(c.train.lr_power)},
          {"iterations", c.train.iterations},
          {"batch_size", c.train.batch_size},
          {"seed", c.train.seed},
          {"eval_every", c.train.eval_every},
          {"prune_steps", c.prune_steps},
          {"fractions", c.fractions},
          {"retrain_iterations", c.retrain_iterations},
          {"retrain_lr", decimal(c.retrain_lr)},
          {"retrain", c.retrain},
          {"threads", c.threads},
          {"sparse", c.sparse},
          {"record_time", c.record_time}};
}

std::string g6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string("--") + what + " is required");
  if (!fs::is_regular_file(path)) throw UsageError(std::string(what) + " file not found: " + path);
}

// Flags shared by the compute subcommands. CLI11 writes into `staged`; only
// options actually given on the command line are copied over the config.
class ConfigFlags {
 public:
  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "JSON config file with flat RunConfig keys");
    bind(app->add_option("--variant", variant, "baseline | mfc | mc"),
         [this](RunConfig& c) { c.variant = variant_from_string(variant); });
    bind_field(app, "--fc-size", &RunConfig::fc_size, "width of the fully connected layer");
    bind_field(app, "--k", &RunConfig::k, "maxout group size");
    bind_field(app, "--conv1", &RunConfig::conv1, "filters of the first convolution");
    bind_field(app, "--conv2", &RunConfig::conv2, "filters of the second convolution (0 = default)");
    bind_field(app, "--data", &RunConfig::data_dir, "MNIST directory (default $MAXPRUNE_DATA)");
    bind_field(app, "--out", &RunConfig::output_dir, "output directory");
    bind_field(app, "--validation", &RunConfig::validation, "training samples held out");
    bind_field(app, "--train-limit", &RunConfig::train_limit, "use only the first N training samples");
    bind_field(app, "--test-limit", &RunConfig::test_limit, "use only the first N test samples");
    bind_field(app, "--steps", &RunConfig::prune_steps, "neuron-pruning steps");
    bind_field(app, "--fractions", &RunConfig::fractions, "weight-pruning fractions")
        ->delimiter(',');
    bind_field(app, "--retrain-iterations", &RunConfig::retrain_iterations, "iterations after pruning");
    bind_field(app, "--retrain-lr", &RunConfig::retrain_lr, "base learning rate after pruning");
    bind(app->add_flag("--no-retrain", "skip retraining after pruning"),
         [](RunConfig& c) { c.retrain = false; });
    bind_field(app, "--threads", &RunConfig::threads, "threads for evaluation and counting");
    bind(app->add_flag("--dense", "store every tensor densely"), [](RunConfig& c) { c.sparse = false; });
    bind(app->add_flag("--record-time", "write wall-clock seconds into reports"),
         [](RunConfig& c) { c.record_time = true; });
    bind_train(app, "--lr", &TrainConfig::base_lr, "base learning rate");
    bind_train(app, "--momentum", &TrainConfig::momentum, "SGD momentum");
    bind_train(app, "--weight-decay", &TrainConfig::weight_decay, "L2 weight decay");
    bind_train(app, "--lr-gamma", &TrainConfig::lr_gamma, "inverse-decay gamma");
    bind_train(app, "--lr-power", &TrainConfig::lr_power, "inverse-decay power");
    bind_train(app, "--iterations", &TrainConfig::iterations, "training iterations");
    bind_train(app, "--batch-size", &TrainConfig::batch_size, "minibatch size");
    bind_train(app, "--seed", &TrainConfig::seed, "random seed");
    bind_train(app, "--eval-every", &TrainConfig::eval_every, "validation interval (0 = off)");
  }

  RunConfig resolve() const {
    RunConfig cfg;
    if (!config_path.empty()) apply_json_text(cfg, read_text(config_path));
    for (const auto& [opt, apply] : bound_)
      if (opt->count() > 0) apply(cfg);
    if (cfg.data_dir.empty())
      if (const char* env = std::getenv("MAXPRUNE_DATA")) cfg.data_dir = env;
    cfg.validate();
    return cfg;
  }

 private:
  void bind(CLI::Option* opt, std::function<void(RunConfig&)> apply) {
    bound_.emplace_back(opt, std::move(apply));
  }
  template <typename T>
  CLI::Option* bind_field(CLI::App* app, const std::string& name, T RunConfig::*field,
                          const std::string& help) {
    CLI::Option* opt = app->add_option(name, staged.*field, help);
    bind(opt, [this, field](RunConfig& c) { c.*field = staged.*field; });
    return opt;
  }
  template <typename T>
  void bind_train(CLI::App* app, const std::string& name, T TrainConfig::*field,
                  const std::string& help) {
    bind(app->add_option(name, staged.train.*field, help),
         [this, field](RunConfig& c) { c.train.*field = staged.train.*field; });
  }

  std::string config_path;
  std::string variant;
  RunConfig staged;
  std::vector<std::pair<CLI::Option*, std::function<void(RunConfig&)>>> bound_;
};

struct Inputs {
  Dataset train;
  Dataset monitor;
  Dataset test;
};

fs::path data_dir(const RunConfig& cfg) {
  if (cfg.data_dir.empty()) throw UsageError("no dataset directory: pass --data or set MAXPRUNE_DATA");
  if (!fs::is_directory(cfg.data_dir)) throw UsageError("dataset directory not found: " + cfg.data_dir);
  return cfg.data_dir;
}

Dataset load_test(const RunConfig& cfg) {
  Dataset test = load_mnist(data_dir(cfg), "test");
  if (cfg.test_limit > 0 && cfg.test_limit < test.size()) test = subset(test, 0, cfg.test_limit);
  return test;
}

Dataset load_train(const RunConfig& cfg, Dataset* monitor) {
  Dataset all = load_mnist(data_dir(cfg), "train");
  Dataset train = std::move(all);
  if (cfg.validation > 0) {
    auto [t, v] = split_validation(train, cfg.validation);
    train = std::move(t);
    if (monitor) *monitor = std::move(v);
  }
  if (cfg.train_limit > 0 && cfg.train_limit < train.size()) train = subset(train, 0, cfg.train_limit);
  return train;
}

void finish_records(std::vector<ExperimentRecord>& records, const RunConfig& cfg) {
  if (!cfg.record_time)
    for (auto& r : records) r.seconds = 0.0;
}

void write_run_json(const fs::path& dir, const std::string& command, const RunConfig& cfg,
                    const json& extra) {
  json j = {{"command", command}, {"config", config_json(cfg)}, {"inputs", extra}};
  write_text(dir / "run.json", j.dump(2) + "\n");
}

fs::path prepare_output(const RunConfig& cfg) {
  fs::path dir(cfg.output_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
  return dir;
}

// ---------------------------------------------------------------------------
// Subcommands

void run_train(const RunConfig& cfg, std::ostream& out) {
  Dataset monitor;
  const Dataset train_data = load_train(cfg, &monitor);
  const Dataset test = load_test(cfg);
  const fs::path dir = prepare_output(cfg);
  write_run_json(dir, "train", cfg, json::object());

  Network net = build_network(cfg.spec(), cfg.train.seed);
  const auto start = std::chrono::steady_clock::now();
  const History history =
      train(net, train_data, cfg.train, monitor.empty() ? nullptr : &monitor);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const double acc = evaluate(net, test, cfg.threads);

  std::string hist = "iteration,loss,lr,eval_accuracy\n";
  for (const auto& h : history)
    hist += std::to_string(h.iteration) + "," + g6(h.loss) + "," + g6(h.lr) + "," +
            (h.eval_accuracy ? g6(*h.eval_accuracy) : std::string()) + "\n";
  write_text(dir / "history.csv", hist);
  save_checkpoint(net, dir / "model.mxpn", false);
  std::vector<ExperimentRecord> records{describe(net, "train", acc, secs, cfg.train.iterations)};
  finish_records(records, cfg);
  write_report(records, dir / "report.csv");
  out << "accuracy " << g6(acc) << "\n";
}

void run_count(const RunConfig& cfg, const std::string& checkpoint, std::ostream& out) {
  Network net = load_checkpoint(checkpoint);
  const Dataset train_data = load_train(cfg, nullptr);
  const fs::path dir = prepare_output(cfg);
  write_run_json(dir, "count", cfg, {{"checkpoint", checkpoint}});
  const WinnerCounts wc = count_winners(net, train_data, cfg.threads);
  json units = json::array();
  for (const auto& u : wc.units) units.push_back({{"survivors", u.survivors}, {"counts", u.counts}});
  write_text(dir / "counts.json", json{{"positions", wc.positions}, {"units", units}}.dump(2) + "\n");
  out << "units " << wc.units.size() << " positions " << wc.positions << "\n";
}

void run_prune_neurons(const RunConfig& cfg, const std::string& checkpoint, std::ostream& out) {
  const Network net = load_checkpoint(checkpoint);
  const Dataset train_data = load_train(cfg, nullptr);
  const Dataset test = load_test(cfg);
  const fs::path dir = prepare_output(cfg);
  write_run_json(dir, "prune-neurons", cfg, {{"checkpoint", checkpoint}});
  PruneSchedule schedule{cfg.retrain_config(), cfg.threads};
  if (!cfg.retrain) schedule.retrain.iterations = 0;
  auto [pruned, records] = iterative_neuron_prune(net, train_data, test, schedule, cfg.prune_steps);
  finish_records(records, cfg);
  save_checkpoint(pruned, dir / "model.mxpn", false);
  write_report(records, dir / "report.csv");
  for (const auto& r : records)
    out << r.stage << " k=" << r.k << " accuracy " << g6(r.accuracy) << " pw% " << g6(r.pw_percent)
        << "\n";
}

void run_prune_weights(const RunConfig& cfg, const std::string& checkpoint, double fraction,
                       std::ostream& out) {
  const Network net = load_checkpoint(checkpoint);
  Dataset train_data;
  if (cfg.retrain) train_data = load_train(cfg, nullptr);
  const Dataset test = load_test(cfg);
  const fs::path dir = prepare_output(cfg);
  write_run_json(dir, "prune-weights", cfg, {{"checkpoint", checkpoint}, {"fraction", fraction}});
  const auto start = std::chrono::steady_clock::now();
  Network pruned = prune_weights(net, threshold_for_fraction(net, fraction)).first;
  if (cfg.retrain && fraction > 0.0) train(pruned, train_data, cfg.retrain_config());
  const double acc = evaluate(pruned, test, cfg.threads);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::vector<ExperimentRecord> records{describe(pruned, "prune-weights-" + g6(fraction), acc, secs)};
  finish_records(records, cfg);
  save_checkpoint(pruned, dir / "model.mxpn", cfg.sparse);
  write_report(records, dir / "report.csv");
  out << "accuracy " << g6(acc) << " combined% " << g6(records[0].combined_percent) << "\n";
}

void run_sweep(const RunConfig& cfg, const std::string& checkpoint, std::ostream& out) {
  const Network net = load_checkpoint(checkpoint);
  Dataset train_data;
  if (cfg.retrain) train_data = load_train(cfg, nullptr);
  const Dataset test = load_test(cfg);
  const fs::path dir = prepare_output(cfg);
  write_run_json(dir, "sweep", cfg, {{"checkpoint", checkpoint}});
  SweepConfig sc{cfg.retrain_config(), cfg.threads, cfg.retrain};
  auto records = sweep_weight_pruning(net, cfg.fractions, train_data, test, sc);
  finish_records(records, cfg);
  write_report(records, dir / "sweep.csv");
  for (const auto& r : records)
    out << r.stage << " accuracy " << g6(r.accuracy) << " dead " << g6(r.dead_fraction) << "\n";
}

void run_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& split,
              std::ostream& out) {
  const Network net = load_checkpoint(checkpoint);
  Dataset data;
  if (split == "test") {
    data = load_test(cfg);
  } else {
    data = load_mnist(data_dir(cfg), "train");
    if (cfg.train_limit > 0 && cfg.train_limit < data.size()) data = subset(data, 0, cfg.train_limit);
  }
  const fs::path dir = prepare_output(cfg);
  write_run_json(dir, "eval", cfg, {{"checkpoint", checkpoint}, {"split", split}});
  const auto correct = correctness(net, data, cfg.threads);
  std::size_t hits = 0;
  std::string bits;
  for (auto c : correct) {
    hits += c;
    bits.push_back(c ? '1' : '0');
  }
  const double acc = static_cast<double>(hits) / static_cast<double>(correct.size());
  write_text(dir / "eval.json",
             json{{"accuracy", acc}, {"samples", correct.size()}, {"correct", bits}}.dump(2) + "\n");
  out << "accuracy " << g6(acc) << "\n";
}

void run_verify(const std::string& embeddings, const fs::path& dir, std::ostream& out) {
  const EmbeddingPairs pairs = load_embeddings(embeddings);
  VerificationScores scores;
  for (const auto& [u, v] : pairs.matched) scores.matched.push_back(bray_curtis(u, v));
  for (const auto& [u, v] : pairs.nonmatched) scores.nonmatched.push_back(bray_curtis(u, v));
  const EerResult r = eer(scores);
  std::string rates = "threshold,far,frr\n";
  for (double t : eer_candidates(scores)) {
    const RatePair p = far_frr(scores, t);
    rates += g6(t) + "," + g6(p.far) + "," + g6(p.frr) + "\n";
  }
  write_text(dir / "rates.csv", rates);
  write_text(dir / "verify.json", json{{"eer", r.eer}, {"threshold", r.threshold},
                                       {"matched", scores.matched.size()},
                                       {"nonmatched", scores.nonmatched.size()}}
                                      .dump(2) +
                                      "\n");
  out << "eer " << g6(r.eer) << " threshold " << g6(r.threshold) << "\n";
}

std::vector<std::uint8_t> read_errors(const std::string& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw FormatError(path + ": not an eval output (" + e.what() + ")");
  }
  if (!j.contains("correct") || !j["correct"].is_string())
    throw FormatError(path + ": missing 'correct' field");
  std::vector<std::uint8_t> errors;
  for (char c : j["correct"].get<std::string>()) {
    if (c != '0' && c != '1') throw FormatError(path + ": 'correct' must contain only 0 and 1");
    errors.push_back(c == '0' ? 1 : 0);
  }
  return errors;
}

void run_compare(const std::string& a, const std::string& b, std::size_t permutations,
                 std::uint64_t seed, const fs::path& dir, std::ostream& out) {
  const auto ea = read_errors(a);
  const auto eb = read_errors(b);
  Rng rng(seed);
  const double p = randomization_test(ea, eb, permutations, rng);
  auto rate = [](const std::vector<std::uint8_t>& e) {
    std::size_t n = 0;
    for (auto v : e) n += v;
    return static_cast<double>(n) / static_cast<double>(e.size());
  };
  write_text(dir / "compare.json", json{{"error_rate_a", rate(ea)}, {"error_rate_b", rate(eb)},
                                        {"permutations", permutations}, {"seed", seed},
                                        {"p_value", p}}
                                       .dump(2) +
                                       "\n");
  out << "p_value " << g6(p) << "\n";
}

void run_report(const std::vector<std::string>& inputs, const fs::path& dir, std::ostream& out) {
  std::vector<ExperimentRecord> all;
  for (const auto& in : inputs) {
    auto rs = read_report(in);
    all.insert(all.end(), rs.begin(), rs.end());
  }
  write_report(all, dir / "report.csv");
  char line[160];
  std::snprintf(line, sizeof line, "%-20s %3s %9s %10s %8s %10s %6s\n", "stage", "k", "accuracy",
                "weights", "p.w.%", "combined%", "dead");
  out << line;
  for (const auto& r : all) {
    std::snprintf(line, sizeof line, "%-20s %3zu %8.2f%% %10llu %8.2f %10.2f %6.3f\n",
                  r.stage.c_str(), r.k, 100.0 * r.accuracy,
                  static_cast<unsigned long long>(r.remaining_weights - r.masked_weights),
                  r.pw_percent, r.combined_percent, r.dead_fraction);
    out << line;
  }
}

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// RunConfig

NetworkSpec RunConfig::spec() const {
  return NetworkSpec::reference(variant, fc_size, k, conv1, conv2);
}

TrainConfig RunConfig::retrain_config() const {
  TrainConfig t = train;
  t.iterations = retrain_iterations;
  t.base_lr = retrain_lr;
  return t;
}

void RunConfig::validate() const {
  train.validate();
  if (fc_size == 0) throw ArgumentError("fc_size must be >= 1");
  if (variant != Variant::baseline && (k < 2 || k > 255))
    throw ArgumentError("k must lie in [2, 255] for maxout variants");
  if (conv1 == 0) throw ArgumentError("conv1 must be >= 1");
  if (variant == Variant::mfc && fc_size % k != 0)
    throw ArgumentError("fc_size " + std::to_string(fc_size) + " is not a multiple of k");
  if (threads == 0 || threads > 256) throw ArgumentError("threads must lie in [1, 256]");
  if (output_dir.empty()) throw ArgumentError("output_dir must not be empty");
  if (!(retrain_lr > 0.0f)) throw ArgumentError("retrain_lr must be > 0");
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    if (!(fractions[i] >= 0.0) || fractions[i] >= 1.0)
      throw ArgumentError("fraction " + std::to_string(fractions[i]) + " outside [0, 1)");
    if (i > 0 && fractions[i] < fractions[i - 1])
      throw ArgumentError("fractions must be ascending");
  }
  spec().validate();
}

std::string to_json_text(const RunConfig& cfg) { return config_json(cfg).dump(2); }

void apply_json_text(RunConfig& cfg, const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ArgumentError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ArgumentError("config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "variant") cfg.variant = variant_from_string(v.get<std::string>());
      else if (key == "fc_size") cfg.fc_size = v.get<std::size_t>();
      else if (key == "k") cfg.k = v.get<std::size_t>();
      else if (key == "conv1") cfg.conv1 = v.get<std::size_t>();
      else if (key == "conv2") cfg.conv2 = v.get<std::size_t>();
      else if (key == "data_dir") cfg.data_dir = v.get<std::string>();
      else if (key == "output_dir") cfg.output_dir = v.get<std::string>();
      else if (key == "validation") cfg.validation = v.get<std::size_t>();
      else if (key == "train_limit") cfg.train_limit = v.get<std::size_t>();
      else if (key == "test_limit") cfg.test_limit = v.get<std::size_t>();
      else if (key == "base_lr") cfg.train.base_lr = v.get<float>();
      else if (key == "momentum") cfg.train.momentum = v.get<float>();
      else if (key == "weight_decay") cfg.train.weight_decay = v.get<float>();
      else if (key == "lr_gamma") cfg.train.lr_gamma = v.get<float>();
      else if (key == "lr_power") cfg.train.lr_power = v.get<float>();
      else if (key == "iterations") cfg.train.iterations = v.get<std::size_t>();
      else if (key == "batch_size") cfg.train.batch_size = v.get<std::size_t>();
      else if (key == "seed") cfg.train.seed = v.get<std::uint64_t>();
      else if (key == "eval_every") cfg.train.eval_every = v.get<std::size_t>();
      else if (key == "prune_steps") cfg.prune_steps = v.get<std::size_t>();
      else if (key == "fractions") cfg.fractions = v.get<std::vector<double>>();
      else if (key == "retrain_iterations") cfg.retrain_iterations = v.get<std::size_t>();
      else if (key == "retrain_lr") cfg.retrain_lr = v.get<float>();
      else if (key == "retrain") cfg.retrain = v.get<bool>();
      else if (key == "threads") cfg.threads = v.get<std::size_t>();
      else if (key == "sparse") cfg.sparse = v.get<bool>();
      else if (key == "record_time") cfg.record_time = v.get<bool>();
      else throw ArgumentError("unknown config key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ArgumentError(std::string("config value has the wrong type: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Dispatch

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Maxout neuron pruning and magnitude weight pruning for LeNet on MNIST", "maxprune"};
  app.require_subcommand(1);

  std::string checkpoint, split = "test", embeddings, eval_a, eval_b, out_dir = "out";
  double fraction = 0.0;
  std::size_t permutations = 10000;
  std::uint64_t seed = 1;
  std::vector<std::string> inputs;

  struct Command {
    CLI::App* app;
    std::unique_ptr<ConfigFlags> flags;
  };
  std::vector<Command> commands;
  auto compute = [&](const char* name, const char* help, bool needs_checkpoint) {
    CLI::App* sub = app.add_subcommand(name, help);
    auto flags = std::make_unique<ConfigFlags>();
    flags->attach(sub);
    if (needs_checkpoint) sub->add_option("--checkpoint", checkpoint, "input checkpoint")->required();
    commands.push_back({sub, std::move(flags)});
    return sub;
  };
  compute("train", "train a network from scratch", false);
  compute("count", "count maxout winners over the training set", true);
  compute("prune-neurons", "iteratively remove the least active maxout neurons", true);
  CLI::App* pw = compute("prune-weights", "mask the smallest weights and retrain", true);
  pw->add_option("--fraction", fraction, "fraction of weights to mask")->required();
  compute("sweep", "weight-pruning accuracy / dead-neuron sweep", true);
  CLI::App* ev = compute("eval", "test accuracy of a checkpoint", true);
  ev->add_option("--split", split, "test | train")->check(CLI::IsMember({"test", "train"}));

  CLI::App* verify = app.add_subcommand("verify", "equal error rate of an embeddings file");
  verify->add_option("--embeddings", embeddings, "embedding pairs file")->required();
  verify->add_option("--out", out_dir, "output directory");
  CLI::App* compare = app.add_subcommand("compare", "randomization test between two eval outputs");
  compare->add_option("--a", eval_a, "first eval.json")->required();
  compare->add_option("--b", eval_b, "second eval.json")->required();
  compare->add_option("--permutations", permutations, "random swaps")->check(CLI::PositiveNumber);
  compare->add_option("--seed", seed, "random seed");
  compare->add_option("--out", out_dir, "output directory");
  CLI::App* report = app.add_subcommand("report", "merge report CSVs and print a summary");
  report->add_option("inputs", inputs, "report CSV files")->required();
  report->add_option("--out", out_dir, "output directory");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands()[0]->help());
      return 0;
    }
    err << "maxprune: error: usage: " << one_line(e.what()) << "\n";
    return 2;
  }

  CLI::App* chosen = app.get_subcommands().front();
  const std::string name = chosen->get_name();
  RunConfig cfg;
  // Resolve everything that depends only on the invocation first, so bad
  // input is reported as a usage error before any compute starts.
  try {
    for (const auto& c : commands)
      if (c.app == chosen) cfg = c.flags->resolve();
    if (!checkpoint.empty()) require_file(checkpoint, "checkpoint");
    if (name == "verify") require_file(embeddings, "embeddings");
    if (name == "compare") {
      require_file(eval_a, "a");
      require_file(eval_b, "b");
    }
    if (name == "report")
      for (const auto& in : inputs) require_file(in, "report");
    if (name == "prune-weights" && (!(fraction >= 0.0) || fraction >= 1.0))
      throw ArgumentError("--fraction must lie in [0, 1)");
    if (name == "train" || name == "count" || name == "prune-neurons" ||
        (name == "prune-weights" && cfg.retrain) || (name == "sweep" && cfg.retrain) ||
        name == "eval")
      data_dir(cfg);
  } catch (const Error& e) {
    err << "maxprune: error: " << (dynamic_cast<const UsageError*>(&e) ? "usage" : e.category())
        << ": " << one_line(e.what()) << "\n";
    return 2;
  }

  try {
    if (name == "train") run_train(cfg, out);
    else if (name == "count") run_count(cfg, checkpoint, out);
    else if (name == "prune-neurons") run_prune_neurons(cfg, checkpoint, out);
    else if (name == "prune-weights") run_prune_weights(cfg, checkpoint, fraction, out);
    else if (name == "sweep") run_sweep(cfg, checkpoint, out);
    else if (name == "eval") run_eval(cfg, checkpoint, split, out);
    else {
      cfg.output_dir = out_dir;
      const fs::path dir = prepare_output(cfg);
      if (name == "verify") {
        write_run_json(dir, name, cfg, {{"embeddings", embeddings}});
        run_verify(embeddings, dir, out);
      } else if (name == "compare") {
        write_run_json(dir, name, cfg,
                       {{"a", eval_a}, {"b", eval_b}, {"permutations", permutations}, {"seed", seed}});
        run_compare(eval_a, eval_b, permutations, seed, dir, out);
      } else {
        write_run_json(dir, name, cfg, {{"reports", inputs}});
        run_report(inputs, dir, out);
      }
    }
  } catch (const Error& e) {
    err << "maxprune: error: " << e.category() << ": " << one_line(e.what()) << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "maxprune: error: internal: " << one_line(e.what()) << "\n";
    return 1;
  }
  return 0;
}

int dispatch(int argc, const char* const* argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return dispatch(args, std::cout, std::cerr);
}

}  // namespace maxprune
