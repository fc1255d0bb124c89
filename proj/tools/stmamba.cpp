// Command-line entry point: training, evaluation, ablations, self-tests,
// synthetic data, format conversion and scan benchmarks.
//
// Exit codes: 0 success, 2 user/config error, 3 data/format error,
// 4 numerical failure.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "stmamba/data.hpp"
#include "stmamba/gradcheck.hpp"
#include "stmamba/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace stm;

namespace {

struct UserError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

ModelConfig make_model_config(const std::string& dataset, int n_channels, int n_samples, int n_classes,
                              const std::string& ablation) {
  ModelConfig cfg;
  if (dataset == "2a") {
    if (n_channels != 22 || n_classes != 4)
      throw UserError("dataset 2a expects 22 channels and 4 classes, archive has " +
                      std::to_string(n_channels) + " channels / " + std::to_string(n_classes) + " classes");
  } else if (dataset == "2b") {
    if (n_channels != 3 || n_classes != 2)
      throw UserError("dataset 2b expects 3 channels and 2 classes, archive has " +
                      std::to_string(n_channels) + " channels / " + std::to_string(n_classes) + " classes");
  }
  cfg.n_electrodes = n_channels;
  cfg.n_classes = n_classes;
  cfg.embedding.n_electrodes = n_channels;
  cfg.n_samples = crop_length(n_samples, cfg.embedding.pool_window, cfg.embedding.pool_stride);
  cfg.ablation = ablation_from(ablation);
  return cfg;
}

void write_history(const std::string& path, const std::vector<EpochRecord>& hist) {
  std::ofstream f(path);
  for (const auto& r : hist) f << r.to_json().dump() << "\n";
}

int run_train(const std::string& data_path, const std::string& dataset, const std::string& ablation,
              uint64_t seed, const std::string& out_dir, int n_classes_flag, double snr_db,
              int trials_per_class, int max_epochs, int patience, int batch, bool verbose) {
  EEGTrialSet train_raw, test_raw;
  SplitSpec split;
  if (dataset == "synth") {
    const int C = 8, L = 960;
    train_raw = synth_generate(trials_per_class, n_classes_flag, C, L, 250.f, snr_db, seed * 1000 + 1, "train");
    test_raw = synth_generate(std::max(1, trials_per_class / 2), n_classes_flag, C, L, 250.f, snr_db,
                              seed * 1000 + 2, "test");
    split.train_sessions = {"train"};
    split.test_sessions = {"test"};
  } else {
    EEGTrialSet all = read_archive(data_path);
    std::set<std::string> sessions(all.session_ids.begin(), all.session_ids.end());
    std::vector<std::string> sorted(sessions.begin(), sessions.end());
    if (sorted.size() < 2) throw UserError("archive has fewer than two sessions; cannot split");
    if (dataset == "2b" && sorted.size() >= 5) {
      split.train_sessions.insert(sorted.begin(), sorted.begin() + 3);
      split.test_sessions.insert(sorted.begin() + 3, sorted.end());
    } else {
      const size_t n_train = sorted.size() - 1;
      split.train_sessions.insert(sorted.begin(), sorted.begin() + n_train);
      split.test_sessions.insert(sorted.begin() + n_train, sorted.end());
    }
    SessionSplit s = split_sessions(all, {split.train_sessions, split.test_sessions, 0.0});
    train_raw = s.train;
    test_raw = s.test;
  }

  ModelConfig mcfg = make_model_config(dataset, train_raw.n_channels, train_raw.n_samples,
                                       train_raw.n_classes, ablation);
  EEGTrialSet merged = train_raw;  // re-split with validation fraction
  {
    const size_t sz = (size_t)test_raw.n_channels * test_raw.n_samples;
    merged.data.insert(merged.data.end(), test_raw.data.begin(), test_raw.data.end());
    merged.labels.insert(merged.labels.end(), test_raw.labels.begin(), test_raw.labels.end());
    merged.session_ids.insert(merged.session_ids.end(), test_raw.session_ids.begin(), test_raw.session_ids.end());
    (void)sz;
  }
  SessionSplit s = split_sessions(merged, {split.train_sessions, split.test_sessions, 0.2});
  EEGTrialSet train = crop_to(s.train, mcfg.n_samples);
  EEGTrialSet val = crop_to(s.val, mcfg.n_samples);
  EEGTrialSet test = crop_to(s.test, mcfg.n_samples);
  standardize(train, {&val, &test});

  TrainConfig tcfg;
  tcfg.seed = seed;
  tcfg.max_epochs = max_epochs;
  tcfg.patience = std::min(patience, max_epochs);
  tcfg.batch_size = batch;

  Model<float> model;
  model.init(mcfg, seed);
  TrainResult res = train_loop(model, train, val, tcfg, verbose);
  Metrics tm = evaluate(model, test);

  fs::create_directories(out_dir);
  model.save((fs::path(out_dir) / "checkpoint.stmc").string());
  write_history((fs::path(out_dir) / "history.jsonl").string(), res.history);
  json manifest = {{"model_config", mcfg.to_json()},
                   {"train_config", tcfg.to_json()},
                   {"split", {{"train_sessions", std::vector<std::string>(split.train_sessions.begin(),
                                                                          split.train_sessions.end())},
                              {"test_sessions", std::vector<std::string>(split.test_sessions.begin(),
                                                                         split.test_sessions.end())},
                              {"val_fraction", 0.2}}},
                   {"dataset", dataset},
                   {"data_path", data_path},
                   {"seed", seed},
                   {"best_epoch", res.best_epoch},
                   {"stopped_epoch", res.stopped_epoch},
                   {"best_val_acc", res.best_val_acc},
                   {"test_accuracy", tm.accuracy},
                   {"artifacts", {{"checkpoint", "checkpoint.stmc"}, {"history", "history.jsonl"}}}};
  std::ofstream((fs::path(out_dir) / "manifest.json").string()) << manifest.dump(2) << "\n";
  std::cout << "test accuracy: " << tm.accuracy << "%\n";
  return 0;
}

void print_metrics(const Metrics& m, int K) {
  std::cout << "accuracy: " << m.accuracy << "%\n";
  std::cout << "per-class:";
  for (double a : m.per_class_accuracy) std::cout << " " << a << "%";
  std::cout << "\nconfusion matrix (rows = true class):\n";
  for (int i = 0; i < K; ++i) {
    for (int j = 0; j < K; ++j) std::cout << m.confusion[i][j] << (j + 1 < K ? ' ' : '\n');
  }
}

int run_eval(const std::string& ckpt, const std::string& data_path) {
  Model<float> model = Model<float>::load(ckpt);
  EEGTrialSet set = read_archive(data_path);
  if (set.n_trials() == 0) throw UserError("evaluation set is empty");
  if (set.n_channels != model.cfg.n_electrodes || set.n_classes != model.cfg.n_classes)
    throw UserError("checkpoint geometry (" + std::to_string(model.cfg.n_electrodes) + " ch, " +
                    std::to_string(model.cfg.n_classes) + " classes) does not match archive");
  EEGTrialSet cropped = crop_to(set, model.cfg.n_samples);
  standardize(cropped, {});
  Metrics m = evaluate(model, cropped);
  print_metrics(m, model.cfg.n_classes);
  json rep = {{"accuracy", m.accuracy}, {"per_class_accuracy", m.per_class_accuracy},
              {"confusion", m.confusion}};
  std::cout << rep.dump() << "\n";
  return 0;
}

int run_selftest(bool inject_fault) {
  using T = double;
  int failures = 0;
  auto report = [&](const std::string& name, bool ok) {
    std::cout << (ok ? "PASS " : "FAIL ") << name << "\n";
    failures += !ok;
  };
  fault_injection() = inject_fault;
  Rng rng(7);

  {  // gradient check: linear layer
    Tensor<T> x = randn<T>({3, 5}, rng, 1.0, true);
    Tensor<T> w = randn<T>({4, 5}, rng, 0.5, true);
    Tensor<T> b = randn<T>({4}, rng, 0.5, true);
    auto f = [&]() { return sum(mul(linear(x, w, &b), linear(x, w, &b))); };
    auto rep = grad_check<T>(f, {{"x", x}, {"w", w}, {"b", b}}, 1e-5, 1e-6);
    report("gradients: linear layer (tol 1e-6)", rep.pass);
  }
  {  // gradient check: selective scan
    const int B = 1, D = 3, L = 8, N = 4;
    Tensor<T> u = randn<T>({B, D, L}, rng, 1.0, true);
    Tensor<T> delta = uniform<T>({B, D, L}, rng, 0.01, 0.2, true);
    Tensor<T> A = uniform<T>({D, N}, rng, -2.0, -0.1, true);
    Tensor<T> Bs = randn<T>({B, L, N}, rng, 1.0, true);
    Tensor<T> Cs = randn<T>({B, L, N}, rng, 1.0, true);
    Tensor<T> Dk = randn<T>({D}, rng, 1.0, true);
    auto f = [&]() { return sum(mul(selective_ssm(u, delta, A, Bs, Cs, Dk), selective_ssm(u, delta, A, Bs, Cs, Dk))); };
    auto rep = grad_check<T>(f, {{"u", u}, {"delta", delta}, {"A", A}, {"B", Bs}, {"C", Cs}, {"D", Dk}},
                             1e-6, 1e-4);
    report("gradients: selective scan (tol 1e-4)", rep.pass);
  }
  {  // scan equivalences
    bool ok = true;
    for (int trial = 0; trial < 10; ++trial) {
      const int B = 2, D = 3, L = 64, N = 8;
      Tensor<T> A = uniform<T>({D, N}, rng, -2.0, -0.05);
      Tensor<T> delta = uniform<T>({B, D, L}, rng, 0.01, 0.5);
      Tensor<T> Bs = randn<T>({B, L, N}, rng);
      Tensor<T> Cs = randn<T>({B, L, N}, rng);
      Tensor<T> u = randn<T>({B, D, L}, rng);
      Tensor<T> Dk = randn<T>({D}, rng);
      Tensor<T> Abar, Bbar;
      discretize_zoh(A, delta, Bs, Abar, Bbar);
      Tensor<T> ys = scan_sequential(Abar, Bbar, Cs, u, Dk);
      for (int chunk : {1, 4, 16, 64}) {
        Tensor<T> yp = scan_parallel(Abar, Bbar, Cs, u, Dk, chunk);
        for (int64_t i = 0; i < ys.size(); ++i) ok &= std::abs(ys.ptr()[i] - yp.ptr()[i]) < 1e-10;
      }
    }
    report("scan: parallel/sequential equivalence", ok);
  }
  {  // pooling oracle
    bool ok = true;
    Tensor<T> x = randn<T>({1, 2, 1, 90}, rng);
    Tensor<T> v = sliding_pool(PoolKind::Var, x, 75, 15);
    for (int c = 0; c < 2; ++c)
      for (int o = 0; o < v.dim(3); ++o) {
        const T* p = x.ptr() + (size_t)c * 90 + o * 15;
        double m = 0;
        for (int i = 0; i < 75; ++i) m += p[i];
        m /= 75;
        double var = 0;
        for (int i = 0; i < 75; ++i) var += (p[i] - m) * (p[i] - m);
        var /= 75;
        ok &= std::abs(var - v.ptr()[(size_t)c * v.dim(3) + o]) < 1e-10;
      }
    report("pooling: two-pass variance oracle", ok);
  }
  {  // augmentation audit
    EEGTrialSet s = synth_generate(6, 2, 3, 64, 250.f, 10, 11);
    EEGTrialSet a = augment_recombine(s, 8, 1, 3);
    bool ok = a.n_trials() == 2 * s.n_trials();
    const int seg = 64 / 8;
    for (size_t i = s.n_trials(); i < a.n_trials() && ok; ++i) {
      for (int g = 0; g < 8; ++g) {
        bool found = false;
        for (size_t j = 0; j < s.n_trials() && !found; ++j) {
          if (s.labels[j] != a.labels[i]) continue;
          bool eq = true;
          for (int c = 0; c < 3 && eq; ++c)
            for (int t = 0; t < seg && eq; ++t)
              eq = a.trial(i)[(size_t)c * 64 + g * seg + t] == s.trial(j)[(size_t)c * 64 + g * seg + t];
          found = eq;
        }
        ok &= found;
      }
    }
    report("augmentation: segment provenance audit", ok);
  }
  fault_injection() = false;
  std::cout << (failures ? "SELFTEST FAILED\n" : "SELFTEST OK\n");
  return failures ? 4 : 0;
}

int run_bench(const std::string& scan, std::vector<int> Ls, int D, int d_state) {
  using T = float;
  if (scan == "kernel") {
    std::cout << "kernel mode applies only to time-invariant parameters; "
                 "selective (time-varying) systems are rejected\n";
  }
  Rng rng(1);
  std::vector<double> logL, logT;
  std::cout << "scan=" << scan << " D=" << D << " N=" << d_state << "\n";
  for (int L : Ls) {
    Tensor<T> A = uniform<T>({D, d_state}, rng, -2.0f, -0.05f);
    Tensor<T> delta = uniform<T>({1, D, L}, rng, 0.01f, 0.5f);
    Tensor<T> Bs = randn<T>({1, L, d_state}, rng);
    Tensor<T> Cs = randn<T>({1, L, d_state}, rng);
    Tensor<T> u = randn<T>({1, D, L}, rng);
    Tensor<T> Dk = randn<T>({D}, rng);
    Tensor<T> Abar, Bbar;
    discretize_zoh(A, delta, Bs, Abar, Bbar);
    std::vector<double> times;
    Tensor<T> ref = scan_sequential(Abar, Bbar, Cs, u, Dk);
    for (int rep = 0; rep < 5; ++rep) {
      const auto t0 = std::chrono::steady_clock::now();
      Tensor<T> y;
      if (scan == "seq")
        y = scan_sequential(Abar, Bbar, Cs, u, Dk);
      else if (scan == "par")
        y = scan_parallel(Abar, Bbar, Cs, u, Dk, 16);
      else
        throw UserError("kernel benchmarking requires LTI parameters; use --scan seq or par");
      times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      for (int64_t i = 0; i < y.size(); ++i)
        if (std::abs(y.ptr()[i] - ref.ptr()[i]) > 1e-4)
          throw NumericalError("bench: scan output mismatch vs sequential oracle");
    }
    std::sort(times.begin(), times.end());
    const double med = times[times.size() / 2];
    std::cout << "L=" << L << "  median " << med * 1e3 << " ms\n";
    logL.push_back(std::log((double)L));
    logT.push_back(std::log(std::max(med, 1e-9)));
  }
  // log-log slope via least squares
  const size_t n = logL.size();
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (size_t i = 0; i < n; ++i) {
    sx += logL[i];
    sy += logT[i];
    sxx += logL[i] * logL[i];
    sxy += logL[i] * logT[i];
  }
  const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  std::cout << "fitted log-log slope: " << slope << "\n";
  if (slope > 1.2) throw NumericalError("scan runtime grows faster than O(L^1.2)");
  std::cout << "linear-scalability check: OK (slope <= 1.2)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"STMambaNet: spatial-temporal selective state-space EEG decoder"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "train a model and report test accuracy");
  std::string data_path, dataset = "synth", ablation = "full", out_dir = "run";
  uint64_t seed = 1;
  int classes = 4, trials_per_class = 100, max_epochs = 150, patience = 30, batch = 64;
  double snr = 20;
  bool verbose = false;
  train->add_option("--data", data_path, "ETA archive path (2a/2b datasets)");
  train->add_option("--dataset", dataset, "2a|2b|synth")->check(CLI::IsMember({"2a", "2b", "synth"}));
  train->add_option("--ablation", ablation, "full|temporal|spatial|none")
      ->check(CLI::IsMember({"full", "temporal", "spatial", "none"}));
  train->add_option("--seed", seed);
  train->add_option("--out", out_dir);
  train->add_option("--classes", classes, "synth: number of classes");
  train->add_option("--snr", snr, "synth: SNR in dB");
  train->add_option("--trials", trials_per_class, "synth: training trials per class");
  train->add_option("--epochs", max_epochs);
  train->add_option("--patience", patience);
  train->add_option("--batch", batch);
  train->add_flag("--verbose", verbose);

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on an archive");
  std::string ckpt;
  eval->add_option("--checkpoint", ckpt)->required();
  eval->add_option("--data", data_path);

  // selftest
  auto* selftest = app.add_subcommand("selftest", "run the property self-test suite");
  bool inject_fault = false;
  selftest->add_flag("--inject-fault", inject_fault)->group("");  // hidden

  // bench
  auto* bench = app.add_subcommand("bench", "scan runtime benchmark");
  std::string scan = "seq";
  std::vector<int> Ls = {256, 512, 1024, 2048, 4096};
  int bench_d = 32, bench_n = 16;
  bench->add_option("--scan", scan)->check(CLI::IsMember({"seq", "par", "kernel"}));
  bench->add_option("--L", Ls);
  bench->add_option("--d", bench_d);
  bench->add_option("--state", bench_n);

  // convert
  auto* convert = app.add_subcommand("convert", "convert a CSV trial directory to an ETA archive");
  std::string from = "csv", to = "eta", in_dir, out_file;
  convert->add_option("--from", from)->check(CLI::IsMember({"csv"}));
  convert->add_option("--to", to)->check(CLI::IsMember({"eta"}));
  convert->add_option("--in", in_dir)->required();
  convert->add_option("--out", out_file)->required();

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic archive");
  std::string synth_out;
  int synth_n = 50, synth_classes = 4, synth_c = 8, synth_l = 960;
  double synth_snr = 20;
  uint64_t synth_seed = 1;
  std::string synth_session = "synth";
  synth->add_option("--out", synth_out)->required();
  synth->add_option("--trials", synth_n);
  synth->add_option("--classes", synth_classes);
  synth->add_option("--channels", synth_c);
  synth->add_option("--samples", synth_l);
  synth->add_option("--snr", synth_snr);
  synth->add_option("--seed", synth_seed);
  synth->add_option("--session", synth_session);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;  // command-line misuse is a user error
  }

  try {
    if (train->parsed())
      return run_train(data_path, dataset, ablation, seed, out_dir, classes, snr, trials_per_class,
                       max_epochs, patience, batch, verbose);
    if (eval->parsed()) return run_eval(ckpt, data_path);
    if (selftest->parsed()) return run_selftest(inject_fault);
    if (bench->parsed()) return run_bench(scan, Ls, bench_d, bench_n);
    if (convert->parsed()) {
      write_archive(import_csv(in_dir), out_file);
      std::cout << "wrote " << out_file << "\n";
      return 0;
    }
    if (synth->parsed()) {
      write_archive(synth_generate(synth_n, synth_classes, synth_c, synth_l, 250.f, synth_snr,
                                   synth_seed, synth_session),
                    synth_out);
      std::cout << "wrote " << synth_out << "\n";
      return 0;
    }
  } catch (const UserError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ArchiveError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 4;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
