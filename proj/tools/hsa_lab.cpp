// hsa-lab: single entry point for training, evaluation, decoding, gradient
// checking, fuzzing, benchmarking and the selection-accuracy demo.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "hsalab/bench.hpp"
#include "hsalab/inference.hpp"
#include "hsalab/manifest.hpp"
#include "hsalab/model.hpp"
#include "hsalab/selection_demo.hpp"
#include "hsalab/tasks.hpp"
#include "hsalab/thread_pool.hpp"
#include "hsalab/verify.hpp"

namespace fs = std::filesystem;
using namespace hsalab;

namespace {

struct GlobalOpts {
  std::string config_path;
  std::uint64_t seed = 42;
  unsigned workers = 0;
  std::string precision = "f32";
  std::string out;
  std::string mode;
  std::size_t steps = static_cast<std::size_t>(-1);  // unset: use total_steps
  std::string lengths = "512,1024";
  std::size_t iterations = 100;
};

std::vector<std::size_t> parse_lengths(const std::string& s) {
  std::vector<std::size_t> out;
  std::size_t pos = 0;
  while (pos < s.size()) {
    std::size_t next = s.find(',', pos);
    if (next == std::string::npos) next = s.size();
    out.push_back(std::stoull(s.substr(pos, next - pos)));
    pos = next + 1;
  }
  return out;
}

RunConfig resolve_config(const GlobalOpts& g) {
  RunConfig cfg;
  if (!g.config_path.empty()) cfg = load_run_config(g.config_path);
  if (!g.mode.empty()) cfg.mode = reset_mode_from_name(g.mode);
  cfg.validate();
  return cfg;
}

void setup_workers(GlobalOpts& g) {
  if (g.workers == 0) {
    if (const char* env = std::getenv("HSA_LAB_WORKERS")) {
      g.workers = static_cast<unsigned>(std::strtoul(env, nullptr, 10));
    }
  }
  if (g.workers != 0) ThreadPool::set_global_workers(g.workers);
  g.workers = ThreadPool::default_workers();
  ThreadPool::global();  // instantiate with the chosen count
}

void emit_manifest(const std::string& cmd, const GlobalOpts& g, const RunConfig& cfg) {
  RunManifest m;
  m.command = cmd;
  m.config = cfg;
  m.seed = g.seed;
  m.workers = g.workers;
  m.precision = g.precision;
  m.git_describe = current_git_describe();
  m.start_time = current_time_iso8601();
  m.out_dir = g.out;
  write_manifest(m);
}

template <typename T>
TrainLane<T> make_lane(const RunConfig& cfg, std::uint64_t seed, std::size_t step,
                       std::size_t lane, const std::vector<std::int32_t>* corpus) {
  TrainLane<T> out;
  Rng rng(hash_mix(hash_mix(seed, 0xda7aULL), hash_mix(step, lane)));
  if (cfg.task.task == "corpus") {
    const std::size_t l = cfg.task.context_len;
    HSALAB_CHECK_INPUT(corpus != nullptr && corpus->size() > l + 1, "corpus too small");
    const std::size_t offset = rng.uniform_int(corpus->size() - l - 1);
    out.tokens.assign(corpus->begin() + offset, corpus->begin() + offset + l);
    out.targets.assign(corpus->begin() + offset + 1, corpus->begin() + offset + l + 1);
  } else {
    const TaskInstance inst =
        gen_task(cfg.task.task, rng, cfg.task.context_len, cfg.task.key_len, cfg.model.vocab);
    out.tokens = inst.tokens;
    out.targets = inst.targets();
  }
  return out;
}

template <typename T>
int cmd_train(const GlobalOpts& g, const RunConfig& cfg, const std::string& resume) {
  Rng init_rng(g.seed);
  RambaModel<T> model(cfg.model, init_rng);
  Trainer<T> trainer(model, cfg, g.seed);
  if (!resume.empty()) trainer.load(resume);

  std::vector<std::int32_t> corpus;
  if (cfg.task.task == "corpus") corpus = read_corpus(cfg.task.corpus_path, cfg.model.vocab);

  const fs::path out_dir(g.out);
  const fs::path metrics_path = out_dir / "metrics.csv";
  std::ofstream metrics;
  if (trainer.current_step() == 0) {
    metrics.open(metrics_path, std::ios::trunc);
    metrics << "step,loss,lr,grad_norm,tokens_per_s\n";
  } else {
    metrics.open(metrics_path, std::ios::app);
  }
  metrics.precision(10);

  auto save_ckpt = [&](const std::string& name) {
    trainer.save((out_dir / name).string());
  };
  save_ckpt("checkpoint_latest.ckpt");  // steps=0 still emits the initial checkpoint

  auto provider = [&](std::size_t step, std::size_t lane) {
    return make_lane<T>(cfg, g.seed, step, lane, corpus.empty() ? nullptr : &corpus);
  };

  const std::size_t target_step =
      g.steps == static_cast<std::size_t>(-1) ? cfg.optim.total_steps
                                              : std::min(g.steps, cfg.optim.total_steps);
  while (trainer.current_step() < target_step) {
    const TrainMetrics m = trainer.step(provider);
    metrics << m.step << "," << m.loss << "," << m.lr << "," << m.grad_norm << ","
            << m.tokens_per_s << "\n";
    metrics.flush();
    if ((m.step + 1) % cfg.checkpoint_every == 0) {
      save_ckpt("checkpoint_" + std::to_string(m.step + 1) + ".ckpt");
      save_ckpt("checkpoint_latest.ckpt");
    }
    if ((m.step % 20) == 0) {
      std::cout << "step " << m.step << " loss " << m.loss << " lr " << m.lr << " grad_norm "
                << m.grad_norm << " tok/s " << m.tokens_per_s << std::endl;
    }
  }
  save_ckpt("checkpoint_latest.ckpt");
  std::cout << "trained to step " << trainer.current_step() << "; artifacts in " << g.out
            << std::endl;
  return 0;
}

template <typename T>
int cmd_eval_passkey(const GlobalOpts& g, const RunConfig& cfg, const std::string& ckpt,
                     std::size_t n_per_len, const std::string& task_kind,
                     const std::string& store) {
  Rng init_rng(g.seed);
  RambaModel<T> model(cfg.model, init_rng);
  if (!ckpt.empty()) {
    CheckpointReader r(ckpt);
    model.load_checkpoint(r);
  }
  StoreBackend backend = StoreBackend::resident;
  if (store == "mem") backend = StoreBackend::offload_memory;
  const auto lengths = parse_lengths(g.lengths);
  const auto points = eval_retrieval(make_model_decoder(model, backend), task_kind, lengths,
                                     n_per_len, cfg.task.key_len, cfg.model.vocab,
                                     hash_mix(g.seed, 0xe7a1ULL));
  const std::string csv = retrieval_csv(points);
  std::ofstream((fs::path(g.out) / "accuracy.csv").string(), std::ios::trunc) << csv;
  std::cout << csv;
  for (const auto& p : points) {
    std::cout << "len " << p.context_len << ": " << p.correct << "/" << p.n << " = " << p.accuracy
              << std::endl;
  }
  return 0;
}

template <typename T>
int cmd_decode(const GlobalOpts& g, const RunConfig& cfg, const std::string& ckpt,
               const std::string& prompt_file, std::size_t prompt_len, std::size_t n_tokens,
               const std::string& store, double temperature) {
  Rng init_rng(g.seed);
  RambaModel<T> model(cfg.model, init_rng);
  if (!ckpt.empty()) {
    CheckpointReader r(ckpt);
    model.load_checkpoint(r);
  }
  StoreBackend backend = StoreBackend::offload_memory;
  std::string store_file;
  if (store == "resident") backend = StoreBackend::resident;
  if (store == "file") {
    backend = StoreBackend::offload_file;
    store_file = (fs::path(g.out) / "kv_store.bin").string();
  }

  std::vector<std::int32_t> prompt;
  if (!prompt_file.empty()) {
    prompt = read_corpus(prompt_file, cfg.model.vocab);
  } else {
    Rng rng(hash_mix(g.seed, 0x9e0deULL));
    prompt.resize(prompt_len == 0 ? cfg.task.context_len : prompt_len);
    for (auto& t : prompt) t = static_cast<std::int32_t>(rng.uniform_int(cfg.model.vocab));
  }

  DecodeSession<T> session(model, backend, store_file);
  session.prefill(prompt);
  Rng sample_rng(hash_mix(g.seed, 0x5a3eULL));
  std::vector<std::int32_t> out;
  for (std::size_t i = 0; i < n_tokens; ++i) {
    const std::int32_t tok = temperature > 0 ? session.sample_pick(temperature, sample_rng)
                                             : session.greedy_pick();
    out.push_back(tok);
    session.decode_step(tok);
  }

  std::cout << "generated:";
  for (auto t : out) std::cout << " " << t;
  std::cout << std::endl;
  const MemoryReport r = session.memory_report();
  std::cout << "memory_report resident_bytes=" << r.resident_bytes
            << " resident_kslc_bytes=" << r.resident_kslc_bytes
            << " offloaded_bytes=" << r.offloaded_bytes << " bytes_fetched=" << r.bytes_fetched
            << " fetches=" << r.fetches << std::endl;
  write_corpus((fs::path(g.out) / "generated.tokens").string(), out);
  return 0;
}

int cmd_gradcheck(const GlobalOpts& g, double tolerance, std::size_t entries) {
  GradCheckOptions opts;
  opts.tol = tolerance;
  opts.eps = 1e-5;
  opts.max_entries_per_param = entries;
  opts.sample_seed = g.seed;
  const ModelConfig cfg = tiny_gradcheck_config();
  const GradCheckReport report = model_gradcheck(cfg, 64, g.seed, opts);
  for (const auto& e : report.entries) {
    std::cout << (e.pass ? "ok   " : "FAIL ") << e.name << " max_rel_err " << e.max_rel_err
              << " (checked " << e.checked << " entries)" << std::endl;
  }
  const auto* w = report.worst();
  std::cout << (report.pass ? "PASS" : "FAIL") << " gradcheck: max rel err " << report.max_rel_err;
  if (w != nullptr) std::cout << " (worst: " << w->name << ")";
  std::cout << std::endl;
  return report.pass ? 0 : 1;
}

int cmd_fuzz(const GlobalOpts& g) {
  const std::size_t iters = g.iterations;
  bool pass = true;

  const auto fwd32 = fuzz_forward_equivalence<float>(hash_mix(g.seed, 1), iters, 1e-5);
  std::cout << (fwd32.pass ? "ok   " : "FAIL ") << "forward equivalence f32: max rel "
            << fwd32.max_rel_err << std::endl;
  if (!fwd32.pass) std::cout << "  seed " << fwd32.failing_seed << ": " << fwd32.detail << "\n";

  const auto fwd64 = fuzz_forward_equivalence<double>(hash_mix(g.seed, 2), iters, 1e-12);
  std::cout << (fwd64.pass ? "ok   " : "FAIL ") << "forward equivalence f64: max rel "
            << fwd64.max_rel_err << std::endl;
  if (!fwd64.pass) std::cout << "  seed " << fwd64.failing_seed << ": " << fwd64.detail << "\n";
  pass = pass && fwd32.pass && fwd64.pass;

  std::size_t causal_fail = 0;
  for (std::size_t i = 0; i < std::max<std::size_t>(1, iters / 4); ++i) {
    std::string detail;
    if (!causality_trial(hash_mix(g.seed, hash_mix(3, i)), &detail)) {
      ++causal_fail;
      std::cout << "  causality seed " << hash_mix(g.seed, hash_mix(3, i)) << ": " << detail
                << "\n";
      break;
    }
  }
  std::cout << (causal_fail == 0 ? "ok   " : "FAIL ") << "causality" << std::endl;
  pass = pass && causal_fail == 0;

  const auto sticks = stick_breaking_fuzz(hash_mix(g.seed, 4), iters * 10);
  std::cout << (sticks.pass ? "ok   " : "FAIL ") << "stick-breaking invariants" << std::endl;
  if (!sticks.pass) std::cout << "  seed " << sticks.failing_seed << ": " << sticks.detail << "\n";
  pass = pass && sticks.pass;

  std::size_t res_fail = 0;
  for (std::size_t i = 0; i < std::max<std::size_t>(1, iters / 16); ++i) {
    std::string detail;
    if (!residency_trial<float>(hash_mix(g.seed, hash_mix(5, i)), 24, /*file_backed=*/i % 2 == 1,
                                g.out, &detail)) {
      ++res_fail;
      std::cout << "  residency seed " << hash_mix(g.seed, hash_mix(5, i)) << ": " << detail
                << "\n";
      break;
    }
  }
  std::cout << (res_fail == 0 ? "ok   " : "FAIL ") << "residency equivalence" << std::endl;
  pass = pass && res_fail == 0;

  std::cout << (pass ? "PASS" : "FAIL") << " fuzz (" << iters << " iterations)" << std::endl;
  return pass ? 0 : 1;
}

int cmd_bench(const GlobalOpts& g) {
  BenchConfig bc;
  bc.seed = g.seed;
  const auto lengths = parse_lengths(g.lengths);
  const auto records = bench_ops(lengths, bc);
  const std::string csv = bench_csv(records);
  std::ofstream((fs::path(g.out) / "bench.csv").string(), std::ios::trunc) << csv;
  std::cout << csv;
  bool audited = true;
  for (const auto& r : records) audited = audited && r.flops_measured == r.flops_predicted;
  std::cout << (audited ? "flop audit: exact" : "flop audit: MISMATCH") << std::endl;
  return audited ? 0 : 1;
}

template <typename T>
int cmd_demo_selection(const GlobalOpts& g, const RunConfig& cfg, const std::string& ckpt,
                       std::size_t train_steps, std::size_t n_instances) {
  Rng init_rng(g.seed);
  RambaModel<T> model(cfg.model, init_rng);
  if (!ckpt.empty()) {
    CheckpointReader r(ckpt);
    model.load_checkpoint(r);
  } else if (train_steps > 0) {
    RunConfig train_cfg = cfg;
    train_cfg.optim.total_steps = train_steps;
    Trainer<T> trainer(model, train_cfg, g.seed);
    auto provider = [&](std::size_t step, std::size_t lane) {
      return make_lane<T>(train_cfg, g.seed, step, lane, nullptr);
    };
    for (std::size_t s = 0; s < train_steps; ++s) {
      const auto m = trainer.step(provider);
      if (s % 50 == 0) std::cout << "demo pre-train step " << s << " loss " << m.loss << "\n";
    }
  }

  const auto result = run_selection_demo(model, cfg.task.task, n_instances, cfg.task.context_len,
                                         cfg.task.key_len, hash_mix(g.seed, 0xde30ULL),
                                         /*emit_csv=*/true);
  std::ofstream((fs::path(g.out) / "selection_demo.csv").string(), std::ios::trunc)
      << result.csv;
  std::cout << "positions " << result.positions << " recall@K selection "
            << result.recall_selection << " meanpool " << result.recall_meanpool << " inversions "
            << result.inversions << std::endl;
  const bool pass = result.recall_selection > result.recall_meanpool && result.inversions > 0;
  std::cout << (pass ? "PASS" : "FAIL") << " demo-selection" << std::endl;
  return pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hsa-lab: hierarchical sparse attention laboratory"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand

  GlobalOpts g;
  app.add_option("--config", g.config_path, "config file (key=value lines)");
  app.add_option("--seed", g.seed, "run seed");
  app.add_option("--workers", g.workers, "worker threads (0 = HSA_LAB_WORKERS or hw)");
  app.add_option("--precision", g.precision, "f32 or f64")
      ->check(CLI::IsMember({"f32", "f64"}));
  app.add_option("--out", g.out, "output directory");
  app.add_option("--mode", g.mode, "bptt_carry | zero_reset | random_carry");
  app.add_option("--steps", g.steps,
                 "train up to this step this invocation (schedule stays on total_steps)");
  app.add_option("--lengths", g.lengths, "comma list of sequence lengths");
  app.add_option("--iterations", g.iterations, "fuzz iterations");

  auto* train = app.add_subcommand("train", "train a model");
  std::string resume;
  train->add_option("--resume", resume, "checkpoint to resume from");

  auto* eval = app.add_subcommand("eval-passkey", "retrieval accuracy per length");
  std::string ckpt, eval_task = "passkey", eval_store = "resident";
  std::size_t n_per_len = 50;
  eval->add_option("--ckpt", ckpt, "checkpoint path");
  eval->add_option("--n", n_per_len, "instances per length");
  eval->add_option("--task", eval_task, "passkey or niah");
  eval->add_option("--store", eval_store, "resident or mem");

  auto* decode = app.add_subcommand("decode", "autoregressive decoding with the tiered store");
  std::string dec_ckpt, prompt_file, dec_store = "mem";
  std::size_t prompt_len = 0, n_tokens = 64;
  double temperature = 0.0;
  decode->add_option("--ckpt", dec_ckpt, "checkpoint path");
  decode->add_option("--prompt-file", prompt_file, "prompt tokens (corpus format)");
  decode->add_option("--prompt-len", prompt_len, "random prompt length when no file given");
  decode->add_option("--tokens", n_tokens, "tokens to generate");
  decode->add_option("--store", dec_store, "resident | mem | file");
  decode->add_option("--temperature", temperature, "0 = greedy");

  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "finite-difference gate (forces f64)");
  double tolerance = 1e-4;
  std::size_t gc_entries = 48;
  gradcheck_cmd->add_option("--tolerance", tolerance, "max relative error");
  gradcheck_cmd->add_option("--entries", gc_entries, "entries checked per parameter (0 = all)");

  auto* fuzz = app.add_subcommand("fuzz", "randomized invariant checks");

  auto* bench = app.add_subcommand("bench", "operator timing/memory CSV");

  auto* demo = app.add_subcommand("demo-selection", "chunk-aware vs mean-pooled selection");
  std::string demo_ckpt;
  std::size_t demo_train_steps = 0, demo_instances = 4;
  demo->add_option("--ckpt", demo_ckpt, "checkpoint path");
  demo->add_option("--train-steps", demo_train_steps, "quick-train steps when no checkpoint");
  demo->add_option("--n", demo_instances, "instances to evaluate");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;  // usage errors exit 2
  }

  try {
    setup_workers(g);
    RunConfig cfg = resolve_config(g);
    const std::string sub = app.get_subcommands().front()->get_name();
    if (g.out.empty()) g.out = "runs/" + sub + "-" + std::to_string(g.seed);
    std::filesystem::create_directories(g.out);
    if (sub == "gradcheck") g.precision = "f64";  // gradient checks always run at 64-bit
    emit_manifest(sub, g, cfg);

    const bool f64 = g.precision == "f64";
    if (train->parsed()) {
      return f64 ? cmd_train<double>(g, cfg, resume) : cmd_train<float>(g, cfg, resume);
    }
    if (eval->parsed()) {
      return f64 ? cmd_eval_passkey<double>(g, cfg, ckpt, n_per_len, eval_task, eval_store)
                 : cmd_eval_passkey<float>(g, cfg, ckpt, n_per_len, eval_task, eval_store);
    }
    if (decode->parsed()) {
      return f64 ? cmd_decode<double>(g, cfg, dec_ckpt, prompt_file, prompt_len, n_tokens,
                                      dec_store, temperature)
                 : cmd_decode<float>(g, cfg, dec_ckpt, prompt_file, prompt_len, n_tokens,
                                     dec_store, temperature);
    }
    if (gradcheck_cmd->parsed()) return cmd_gradcheck(g, tolerance, gc_entries);
    if (fuzz->parsed()) return cmd_fuzz(g);
    if (bench->parsed()) return cmd_bench(g);
    if (demo->parsed()) {
      return f64 ? cmd_demo_selection<double>(g, cfg, demo_ckpt, demo_train_steps, demo_instances)
                 : cmd_demo_selection<float>(g, cfg, demo_ckpt, demo_train_steps, demo_instances);
    }
    std::cerr << "unknown subcommand" << std::endl;
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 2;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << std::endl;
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
}
