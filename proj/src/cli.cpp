#include "cdmm/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "cdmm/data.hpp"
#include "cdmm/error.hpp"
#include "cdmm/eval.hpp"
#include "cdmm/log.hpp"
#include "cdmm/run_config.hpp"
#include "cdmm/selfcheck.hpp"
#include "cdmm/trainer.hpp"

namespace cdmm {

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::uint64_t seed = 0;
};

RunConfig config_of(const Common& c) { return c.config.empty() ? RunConfig{} : load_run_config(c.config); }

struct SyntheticSets {
  Corpus train, dev, probe, test;
};

SyntheticSets synthetic_sets(const RunConfig& cfg, std::uint64_t seed) {
  SyntheticConfig s = cfg.data;
  s.seed = derive_seed(seed, kSeedData);
  s.n_utterances = cfg.counts.total();
  const Corpus all = generate_synthetic_corpus(s);
  SyntheticSets out;
  auto it = all.begin();
  for (auto [dst, n] : {std::pair{&out.train, cfg.counts.train}, {&out.dev, cfg.counts.dev},
                        {&out.probe, cfg.counts.probe}, {&out.test, cfg.counts.test}}) {
    dst->assign(it, it + static_cast<std::ptrdiff_t>(n));
    it += static_cast<std::ptrdiff_t>(n);
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw FormatError("write failed for '" + path.string() + "'");
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string file_magic(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  char m[4] = {};
  in.read(m, 4);
  return std::string(m, static_cast<std::size_t>(in.gcount()));
}

// A checkpoint file, or a training output directory.
fs::path resolve_checkpoint(const fs::path& p) {
  if (!fs::is_directory(p)) return p;
  for (const char* name : {"best.ckpt", "supervised.ckpt"})
    if (fs::exists(p / name)) return p / name;
  throw FormatError("no checkpoint (best.ckpt or supervised.ckpt) in '" + p.string() + "'");
}

FeatureExtractor load_extractor(const fs::path& spec) {
  const fs::path path = resolve_checkpoint(spec);
  const std::string magic = file_magic(path);
  if (magic == kCheckpointMagic) {
    const Checkpoint c = load_checkpoint(path);
    return convdmm_extractor(c.theta, c.phi);
  }
  if (magic == kSupervisedMagic) return supervised_extractor(load_supervised(path));
  throw FormatError("'" + path.string() + "' is neither a model nor a supervised checkpoint");
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

int cmd_gen_data(const Common& c, const std::string& out_dir, std::ostream& out) {
  const RunConfig cfg = config_of(c);
  const SyntheticSets sets = synthetic_sets(cfg, c.seed);
  fs::create_directories(out_dir);
  for (auto [name, corpus] : {std::pair{"train", &sets.train}, {"dev", &sets.dev}, {"probe", &sets.probe},
                              {"test", &sets.test}}) {
    if (corpus->empty()) continue;
    const fs::path p = fs::path(out_dir) / (std::string(name) + ".cdft");
    write_features(p, *corpus);
    out << p.string() << ": " << corpus->size() << " utterances, " << corpus_frames(*corpus) << " frames\n";
  }
  return kExitOk;
}

int cmd_train(const Common& c, const std::string& mode, const std::string& train_path, const std::string& dev_path,
              const std::string& out_dir, bool resume, std::ostream& out) {
  const RunConfig cfg = config_of(c);
  Corpus tr, dev;
  if (train_path.empty() != dev_path.empty()) throw ContractError("--train and --dev must be given together");
  if (train_path.empty()) {
    SyntheticSets s = synthetic_sets(cfg, c.seed);
    tr = std::move(s.train);
    dev = std::move(s.dev);
  } else {
    tr = read_features(train_path);
    dev = read_features(dev_path);
  }
  if (tr.empty() || dev.empty()) throw ContractError("training needs nonempty train and dev sets");
  ModelConfig model = cfg.model;
  model.obs_dim = corpus_dim(tr);
  fs::create_directories(out_dir);

  if (mode == "supervised") {
    if (resume) throw ContractError("--resume applies to markov and isotropic training only");
    SupervisedConfig sc = cfg.supervised;
    sc.seed = derive_seed(c.seed, kSeedSupervised);
    const std::size_t n_phones = std::max(label_count(tr), label_count(dev));
    const SupervisedResult r = train_supervised_baseline(tr, dev, model, n_phones, sc);
    save_supervised(fs::path(out_dir) / "supervised.ckpt", r.best);
    std::string log = "epoch,train_loss,dev_loss\n";
    for (const auto& e : r.log) log += std::to_string(e.epoch) + "," + fmt(e.train_loss) + "," + fmt(e.dev_loss) + "\n";
    write_text(fs::path(out_dir) / "supervised_log.csv", log);
    out << "supervised dev PER " << fmt(r.dev_per) << "\n";
    return kExitOk;
  }

  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(c.seed, kSeedTrain);
  tc.mode = parse_model_mode(mode);
  TrainOptions opts;
  opts.out_dir = out_dir;
  if (resume) {
    Checkpoint ck = load_checkpoint(fs::path(out_dir) / "last.ckpt");
    if (ck.config_hash != config_hash(model, tc)) {
      throw FormatError("'" + (fs::path(out_dir) / "last.ckpt").string() + "' was written with a different configuration");
    }
    opts.resume = std::move(ck);
  }
  opts.on_epoch = [](const EpochRecord& r) {
    log_info("epoch " + std::to_string(r.epoch) + " train " + fmt(r.train_loss) + " dev " + fmt(r.dev_loss));
  };
  const TrainResult r = train(tr, dev, model, tc, opts);
  double best = r.best.dev_history.empty() ? 0.0 : r.best.dev_history.back();
  out << to_string(tc.mode) << ": " << r.last.epoch << " epochs, best dev loss " << fmt(best) << " after epoch "
      << (r.best.epoch ? r.best.epoch - 1 : 0) << "\n";
  return kExitOk;
}

int cmd_extract(const std::string& ckpt, const std::string& in, const std::string& out_path, std::ostream& out) {
  const FeatureExtractor fx = load_extractor(ckpt);
  const Corpus feats = extract_corpus(read_features(in), fx);
  write_features(out_path, feats);
  out << out_path << ": " << feats.size() << " utterances, width " << (feats.empty() ? 0 : corpus_dim(feats)) << "\n";
  return kExitOk;
}

int cmd_probe(const Common& c, const std::string& train_path, const std::string& test_path, std::ostream& out) {
  const RunConfig cfg = config_of(c);
  const Corpus tr = read_features(train_path), te = read_features(test_path);
  if (tr.empty() || te.empty()) throw ContractError("probe needs nonempty train and test features");
  ProbeConfig pc = cfg.protocol.probe;
  pc.seed = derive_seed(c.seed, kSeedProbes);
  // Reuse the protocol machinery: one system, the whole training file, one seed.
  ProtocolConfig proto = cfg.protocol;
  proto.fractions = {1.0};
  proto.n_splits = 1;
  proto.n_probe_seeds = 1;
  proto.probe_seed = pc.seed;
  const ProtocolReport r = run_protocol({{"features", tr, te}}, proto);
  out << "fer," << fmt(r.runs.front().fer) << "\nper," << fmt(r.runs.front().per) << "\n";
  return kExitOk;
}

SystemFeatures system_from_spec(const std::string& spec, const Corpus& pool, const Corpus& test, std::size_t jobs) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0) throw CLI::ValidationError("--system", "expected NAME=SPEC, got '" + spec + "'");
  const std::string name = spec.substr(0, eq), what = spec.substr(eq + 1);
  if (what == "raw") return {name, pool, test};
  if (what.rfind("features:", 0) == 0) {
    const std::string files = what.substr(9);
    const auto comma = files.find(',');
    if (comma == std::string::npos) throw CLI::ValidationError("--system", "features: needs POOL,TEST");
    return {name, attach_labels(read_features(files.substr(0, comma)), pool),
            attach_labels(read_features(files.substr(comma + 1)), test)};
  }
  const FeatureExtractor fx = load_extractor(what);
  return {name, extract_corpus(pool, fx, jobs), extract_corpus(test, fx, jobs)};
}

int cmd_evaluate(const Common& c, const std::string& pool_path, const std::string& test_path,
                 const std::vector<std::string>& specs, const std::string& out_dir, std::size_t jobs,
                 std::ostream& out) {
  const RunConfig cfg = config_of(c);
  ProtocolConfig pc = cfg.protocol;
  pc.split_seed = derive_seed(c.seed, kSeedSplits);
  pc.probe_seed = derive_seed(c.seed, kSeedProbes);
  pc.jobs = jobs;
  const Corpus pool = read_features(pool_path), test = read_features(test_path);
  std::vector<SystemFeatures> systems;
  for (const auto& s : specs) {
    systems.push_back(system_from_spec(s, pool, test, jobs));
    log_info("features ready for system '" + systems.back().name + "'");
  }
  const ProtocolReport r = run_protocol(systems, pc);
  fs::create_directories(out_dir);
  write_text(fs::path(out_dir) / "report.csv", report_csv(r));
  write_text(fs::path(out_dir) / "report.json", report_json(r));
  out << report_csv(r);
  return kExitOk;
}

int cmd_report(const std::string& in, const std::string& out_path, std::ostream& out) {
  const ProtocolReport r = parse_report_json(read_text(in));
  const std::string csv = report_csv(r);
  if (out_path.empty()) {
    out << csv;
  } else {
    write_text(out_path, csv);
  }
  return kExitOk;
}

int cmd_selfcheck(std::ostream& out) {
  bool ok = true;
  for (const auto& r : run_selfcheck()) {
    out << (r.passed ? "PASS  " : "FAIL  ") << r.name << "  (" << r.detail << ")\n";
    ok = ok && r.passed;
  }
  return ok ? kExitOk : kExitNumerical;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Convolutional deep Markov model toolkit"};
  app.name(args.empty() ? "cdmm" : fs::path(args[0]).filename().string());
  app.require_subcommand(1);

  Common common;
  auto add_common = [&](CLI::App* s) {
    s->add_option("--config", common.config, "key = value configuration file (defaults apply to absent keys)");
    s->add_option("--seed", common.seed, "master seed; every consumer derives its own stream from it")
        ->capture_default_str();
  };

  std::string out_dir, train_path, dev_path, mode = "markov", ckpt, in_path, out_path, test_path, pool_path;
  bool resume = false;
  std::size_t jobs = 1;
  std::vector<std::string> systems;

  CLI::App* gen = app.add_subcommand("gen-data", "Generate the synthetic corpus as train/dev/probe/test CDFT files");
  add_common(gen);
  gen->add_option("--out", out_dir, "output directory")->required();

  CLI::App* tr = app.add_subcommand("train", "Train a ConvDMM, GaussVAE or supervised baseline");
  add_common(tr);
  tr->add_option("--mode", mode, "markov (alias convdmm), isotropic (alias gaussvae) or supervised")
      ->check(CLI::IsMember({"markov", "isotropic", "convdmm", "gaussvae", "supervised"}))
      ->capture_default_str();
  tr->add_option("--train", train_path, "training CDFT file (default: synthetic corpus from the config)");
  tr->add_option("--dev", dev_path, "development CDFT file (required with --train)");
  tr->add_option("--out", out_dir, "output directory for checkpoints and logs")->required();
  tr->add_flag("--resume", resume, "continue from <out>/last.ckpt");

  CLI::App* ex = app.add_subcommand("extract", "Write frozen features of a corpus to a CDFT file");
  ex->add_option("--ckpt", ckpt, "checkpoint file or training output directory")->required();
  ex->add_option("--in", in_path, "input CDFT file")->required();
  ex->add_option("--out", out_path, "output CDFT file")->required();

  CLI::App* pr = app.add_subcommand("probe", "Train one frame classifier and one CTC recognizer on features");
  add_common(pr);
  pr->add_option("--train", train_path, "labeled feature file to train on")->required();
  pr->add_option("--test", test_path, "labeled feature file to score")->required();

  CLI::App* ev = app.add_subcommand("evaluate", "Run the split x seed probing protocol and write report.csv/json");
  add_common(ev);
  ev->add_option("--pool", pool_path, "labeled CDFT file the splits are drawn from")->required();
  ev->add_option("--test", test_path, "labeled CDFT test file")->required();
  ev->add_option("--system", systems,
                 "NAME=SPEC, repeatable; SPEC is a checkpoint file or directory, 'raw', or features:POOL.cdft,TEST.cdft")
      ->required();
  ev->add_option("--out", out_dir, "output directory")->required();
  ev->add_option("--jobs", jobs, "probe worker threads")->check(CLI::PositiveNumber)->capture_default_str();

  CLI::App* rep = app.add_subcommand("report", "Recompute the table from a report.json sidecar");
  rep->add_option("--in", in_path, "report.json")->required();
  rep->add_option("--out", out_path, "CSV output file (default: standard output)");

  CLI::App* sc = app.add_subcommand("selfcheck", "Run the built-in oracle checks");

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  if (argv.empty()) argv.push_back("cdmm");
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(common, out_dir, out);
    if (tr->parsed()) return cmd_train(common, mode, train_path, dev_path, out_dir, resume, out);
    if (ex->parsed()) return cmd_extract(ckpt, in_path, out_path, out);
    if (pr->parsed()) return cmd_probe(common, train_path, test_path, out);
    if (ev->parsed()) return cmd_evaluate(common, pool_path, test_path, systems, out_dir, jobs, out);
    if (rep->parsed()) return cmd_report(in_path, out_path, out);
    if (sc->parsed()) return cmd_selfcheck(out);
  } catch (const CLI::Error& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}

int dispatch(int argc, char** argv) {
  return dispatch(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}

}  // namespace cdmm
