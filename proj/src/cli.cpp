#include "xdvae/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "xdvae/bundle_io.hpp"
#include "xdvae/checkpoint.hpp"
#include "xdvae/config.hpp"
#include "xdvae/data.hpp"
#include "xdvae/errors.hpp"
#include "xdvae/io_util.hpp"
#include "xdvae/metrics.hpp"
#include "xdvae/trainer.hpp"

namespace xdvae {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, ',')) {
    cur.erase(0, cur.find_first_not_of(" \t"));
    cur.erase(cur.find_last_not_of(" \t") + 1);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

std::vector<std::size_t> parse_sizes(const std::string& s, const char* what) {
  std::vector<std::size_t> out;
  for (const auto& tok : split_csv(s)) {
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != tok.size() || v < 0) throw std::invalid_argument(std::string(what) + ": bad value '" + tok + "'");
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.empty()) throw std::invalid_argument(std::string(what) + ": empty list");
  return out;
}

std::vector<double> parse_reals(const std::string& s, const char* what) {
  std::vector<double> out;
  for (const auto& tok : split_csv(s)) {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != tok.size()) throw std::invalid_argument(std::string(what) + ": bad value '" + tok + "'");
    out.push_back(v);
  }
  if (out.empty()) throw std::invalid_argument(std::string(what) + ": empty list");
  return out;
}

std::string fixed(double v, int prec) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(prec) << v;
  return s.str();
}

std::string dump_file(const json& j) { return j.dump(1) + "\n"; }

/// Hash over every file in the bundle directory, in name order.
std::string bundle_fingerprint(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string acc;
  for (const auto& f : files) acc += f.filename().string() + ":" + file_fingerprint(f) + ";";
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(acc)));
  return buf;
}

json seed_table(std::uint64_t seed) {
  json j{{"run", seed}};
  for (const char* s : {"shuffle", "eps", "eval-eps", "cold-negatives"}) j[s] = derive_seed(seed, s);
  return j;
}

struct Manifest {
  json j;
  Manifest(const std::string& command, const std::vector<std::string>& argv) {
    j["tool_version"] = kToolVersion;
    j["command"] = command;
    j["argv"] = argv;
  }
  void write(const fs::path& path) const { write_text(path, dump_file(j)); }
};

// ---------------------------------------------------------------------------
// Shared training flags: preset < --config file < explicit flags.

struct TrainFlags {
  std::string config_path;
  std::string preset = "movielens";
  std::string variant, dims, source_dims, target_dims, aux_dims, aux_attach, mode;
  double beta = 0, lambda_reg = 0, lr = 0;
  std::size_t batch_size = 0, epochs = 0, latent_dim = 0;
  std::uint64_t seed = 0;
  bool map_stop_gradient = false, early_stop = false;
  std::map<std::string, CLI::Option*> o;

  void add(CLI::App* sub, bool with_variant) {
    sub->add_option("--config", config_path, "JSON config file");
    sub->add_option("--preset", preset, "movielens | amazon")->check(CLI::IsMember({"movielens", "amazon"}));
    if (with_variant) o["variant"] = sub->add_option("--variant", variant, "generic|single|merged|no-mmd|cold-start|aux");
    o["beta"] = sub->add_option("--beta", beta, "positive-reconstruction weight");
    o["lambda"] = sub->add_option("--lambda-reg", lambda_reg, "L2 coefficient");
    o["lr"] = sub->add_option("--lr", lr, "Adam learning rate");
    o["batch"] = sub->add_option("--batch-size", batch_size);
    o["epochs"] = sub->add_option("--epochs", epochs);
    o["latent"] = sub->add_option("--latent-dim", latent_dim);
    o["dims"] = sub->add_option("--dims", dims, "hidden widths for both domains, e.g. 512,256");
    o["sdims"] = sub->add_option("--source-dims", source_dims);
    o["tdims"] = sub->add_option("--target-dims", target_dims);
    o["adims"] = sub->add_option("--aux-dims", aux_dims);
    o["attach"] = sub->add_option("--aux-attach", aux_attach, "source | target | both");
    o["mode"] = sub->add_option("--inference", mode, "mean | sample");
    o["seed"] = sub->add_option("--seed", seed);
    o["stopgrad"] = sub->add_flag("--map-stop-gradient", map_stop_gradient);
    o["early"] = sub->add_flag("--early-stop", early_stop);
  }

  bool set(const char* k) const {
    auto it = o.find(k);
    return it != o.end() && it->second->count() > 0;
  }

  ModelConfig resolve() const {
    ModelConfig c = preset == "amazon" ? amazon_preset() : movielens_preset();
    if (!config_path.empty()) {
      json j;
      try {
        j = json::parse(read_file(config_path));
      } catch (const json::exception& e) {
        throw std::invalid_argument("config " + config_path + ": " + e.what());
      }
      c.merge_json(j);
    }
    if (set("variant")) c.variant = parse_variant(variant);
    if (set("beta")) c.beta = beta;
    if (set("lambda")) c.lambda_reg = lambda_reg;
    if (set("lr")) c.lr = lr;
    if (set("batch")) c.batch_size = batch_size;
    if (set("epochs")) c.epochs = epochs;
    if (set("latent")) c.latent_dim = latent_dim;
    if (set("dims")) c.source_dims = c.target_dims = parse_sizes(dims, "--dims");
    if (set("sdims")) c.source_dims = parse_sizes(source_dims, "--source-dims");
    if (set("tdims")) c.target_dims = parse_sizes(target_dims, "--target-dims");
    if (set("adims")) c.aux_dims = parse_sizes(aux_dims, "--aux-dims");
    if (set("attach")) c.aux_attach = parse_aux_attach(aux_attach);
    if (set("mode")) c.merge_json({{"inference_mode", mode}});
    if (set("seed")) c.seed = seed;
    if (set("stopgrad")) c.map_stop_gradient = map_stop_gradient;
    if (set("early")) c.early_stop = early_stop;
    c.validate();
    return c;
  }
};

std::string loss_line(const LossBreakdown& l) {
  std::ostringstream s;
  s << std::setprecision(6) << "total " << l.total << " | recon_S " << l.recon_source << " recon_T " << l.recon_target
    << " kl_S " << l.kl_source << " kl_T " << l.kl_target << " reg " << l.reg << " mmd " << l.mmd << " map "
    << l.map_loss;
  return s.str();
}

void print_reports(std::ostream& out, const std::vector<MetricsReport>& reports) {
  out << std::left << std::setw(12) << "variant" << std::setw(16) << "protocol" << std::setw(5) << "K" << std::setw(10)
      << "HR" << std::setw(10) << "NDCG" << "m\n";
  for (const auto& r : reports)
    for (std::size_t i = 0; i < r.ks.size(); ++i)
      out << std::left << std::setw(12) << r.variant << std::setw(16) << r.protocol << std::setw(5) << r.ks[i]
          << std::setw(10) << fixed(r.hr[i], 4) << std::setw(10) << fixed(r.ndcg[i], 4) << r.m_evaluated << "\n";
}

/// Bundle + users to train on. Cold-start trains on the train users' full
/// rows; every other variant on leave-one-out training rows.
std::pair<DatasetBundle, std::vector<std::uint32_t>> training_data(const PreparedData& prep, const ModelConfig& cfg) {
  if (cfg.variant == Variant::ColdStart) return {prep.bundle, prep.cold.train_users};
  return {prep.training_bundle(), {}};
}

// ---------------------------------------------------------------------------

struct PrepareArgs {
  std::string ratings, items, format = "movielens-dat", source_labels, target_labels, out, aux, holdout = "random";
  int min_rating = 4;
  std::size_t min_target = 2, aux_dim = 256;
  std::uint64_t seed = 0;
  double cold_fraction = 0.1;
};

int cmd_prepare(const PrepareArgs& a, std::ostream& out) {
  const auto src = split_csv(a.source_labels);
  const auto tgt = split_csv(a.target_labels);
  const LabelSet src_set(src.begin(), src.end());
  const LabelSet tgt_set(tgt.begin(), tgt.end());
  if (src_set.empty() || tgt_set.empty()) throw std::invalid_argument("label sets must be non-empty");
  for (const auto& l : src_set)
    if (tgt_set.count(l)) throw std::invalid_argument("label '" + l + "' is in both source and target sets");
  if (a.min_rating < 1) throw std::invalid_argument("--min-rating must be >= 1");
  if (!(a.cold_fraction > 0.0 && a.cold_fraction < 1.0)) throw std::invalid_argument("--cold-fraction must lie in (0, 1)");
  if (a.holdout != "random" && a.holdout != "latest") throw std::invalid_argument("--holdout must be random or latest");
  const auto fmt = parse_rating_format(a.format);

  const auto ratings = load_ratings(a.ratings, fmt);
  const auto labels = load_item_labels(a.items, fmt);
  const auto [s, t] = split_domains(ratings, labels, src_set, tgt_set);
  PreparedData prep;
  prep.bundle = binarize_and_filter(s, t, a.min_rating, a.min_target);
  if (!a.aux.empty()) attach_aux_vectors(prep.bundle, load_aux_vectors(a.aux, a.aux_dim), a.aux_dim);
  prep.loo = build_loo_split(prep.bundle, a.seed, a.holdout == "latest" ? HoldOutPolicy::Latest : HoldOutPolicy::Random)
                 .split;
  prep.cold = cold_start_split(prep.bundle, a.cold_fraction, a.seed);
  prep.run = {{"tool_version", kToolVersion},
              {"seed", a.seed},
              {"format", a.format},
              {"ratings_fingerprint", file_fingerprint(a.ratings)},
              {"items_fingerprint", file_fingerprint(a.items)},
              {"source_labels", src_set},
              {"target_labels", tgt_set},
              {"min_rating", a.min_rating},
              {"holdout", a.holdout}};
  if (!a.aux.empty()) prep.run["aux_fingerprint"] = file_fingerprint(a.aux);
  save_prepared(prep, a.out);

  const auto& b = prep.bundle;
  out << std::left << std::setw(8) << "domain" << std::setw(8) << "users" << std::setw(8) << "items" << std::setw(14)
      << "interactions" << "sparsity\n";
  for (const auto* dm : {&b.source, &b.target}) {
    out << std::left << std::setw(8) << (dm == &b.source ? "source" : "target") << std::setw(8) << dm->n_users()
        << std::setw(8) << dm->n_items() << std::setw(14) << dm->nnz() << fixed(100.0 * dm->sparsity(), 2) << "%\n";
  }
  out << "cold-start test users: " << prep.cold.test_users.size() << "\n";
  out << "wrote " << a.out << "\n";
  return kExitOk;
}

int cmd_train(const TrainFlags& f, const std::string& bundle_dir, const std::string& out_path, bool quiet,
              const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  const auto cfg = f.resolve();
  const auto prep = load_prepared(bundle_dir);
  const auto [training, users] = training_data(prep, cfg);
  const auto result = train<double>(training, cfg, users, [&](const EpochRecord& r) {
    if (!quiet) err << "epoch " << r.epoch << "/" << cfg.epochs << "  " << loss_line(r.loss) << "\n";
  });

  const fs::path ckpt(out_path);
  if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
  const fs::path hist = ckpt.string() + ".history.json";
  const fs::path man = ckpt.string() + ".manifest.json";
  save_checkpoint(result.params, cfg, ckpt);
  auto hj = result.history.to_json();
  hj["manifest"] = man.filename().string();
  write_text(hist, dump_file(hj));

  Manifest m("train", argv);
  m.j["config_path"] = f.config_path;
  m.j["config"] = cfg.to_json();
  m.j["dataset_fingerprint"] = bundle_fingerprint(bundle_dir);
  m.j["seeds"] = seed_table(cfg.seed);
  m.j["artifacts"] = {ckpt.string(), hist.string()};
  m.write(man);

  for (const auto& w : result.history.warnings) err << "warning: " << w << "\n";
  if (result.history.epochs.empty()) {
    out << "epochs=0: wrote initial parameters\n";
  } else {
    out << "final " << loss_line(result.history.epochs.back().loss) << "\n";
  }
  out << "wrote " << ckpt.string() << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string model, bundle, ks = "5,10,20,50", protocol = "standard", fractions = "1.0,0.75,0.5,0.25,0.0", out,
                               mode;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
};

void write_metrics(const std::vector<MetricsReport>& reports, const std::string& prefix, Manifest m) {
  const fs::path base(prefix);
  if (base.has_parent_path()) fs::create_directories(base.parent_path());
  const fs::path jp = prefix + ".json", cp = prefix + ".csv", mp = prefix + ".manifest.json";
  write_text(jp, dump_file({{"manifest", mp.filename().string()}, {"reports", reports_to_json(reports)}}));
  write_text(cp, reports_to_csv(reports));
  m.j["artifacts"] = {jp.string(), cp.string()};
  m.write(mp);
}

int cmd_eval(const EvalArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
  const auto ks = parse_sizes(a.ks, "--ks");
  validate_ks(ks);
  const auto ck = load_checkpoint<double>(a.model);
  const auto prep = load_prepared(a.bundle);
  const auto seed = a.seed_opt && a.seed_opt->count() ? a.seed : ck.config.seed;
  auto mode = ck.config.inference_mode;
  if (!a.mode.empty()) {
    if (a.mode != "mean" && a.mode != "sample") throw std::invalid_argument("--inference must be mean or sample");
    mode = a.mode == "mean" ? InferenceMode::Mean : InferenceMode::Sample;
  }

  std::vector<MetricsReport> reports;
  if (a.protocol == "standard") {
    if (ck.params.variant == Variant::ColdStart) {
      throw std::invalid_argument("standard protocol feeds target rows; evaluate cold-start models with --protocol coldstart");
    }
    reports.push_back(evaluate(ck.params, prep.loo, prep.training_bundle(), ks, mode, seed));
  } else if (a.protocol == "degrade") {
    reports = evaluate_degraded(ck.params, prep.loo, prep.training_bundle(), parse_reals(a.fractions, "--fractions"),
                                seed, ks);
  } else if (a.protocol == "coldstart") {
    reports.push_back(evaluate_cold_start(ck.params, prep.cold, prep.bundle, ks, seed));
  } else {
    throw std::invalid_argument("unknown protocol '" + a.protocol + "'");
  }

  Manifest m("eval", argv);
  m.j["config"] = ck.config.to_json();
  m.j["model_fingerprint"] = file_fingerprint(a.model);
  m.j["dataset_fingerprint"] = bundle_fingerprint(a.bundle);
  m.j["seeds"] = seed_table(seed);
  m.j["protocol"] = a.protocol;
  write_metrics(reports, a.out, m);
  print_reports(out, reports);
  return kExitOk;
}

struct AblateArgs {
  std::string bundle, variants = "generic,single,single0,merged,merged0,no-mmd", seeds, beta_sweep, ks = "5,10,20,50",
                      out;
  bool quiet = false;
};

int cmd_ablate(const TrainFlags& f, const AblateArgs& a, const std::vector<std::string>& argv, std::ostream& out,
               std::ostream& err) {
  const auto base = f.resolve();
  const auto ks = parse_sizes(a.ks, "--ks");
  validate_ks(ks);
  std::vector<std::uint64_t> seeds;
  if (a.seeds.empty()) {
    seeds.push_back(base.seed);
  } else {
    for (auto s : parse_sizes(a.seeds, "--seeds")) seeds.push_back(s);
  }

  // (label, config) pairs: either the variant suite or a beta sweep of generic.
  std::vector<std::pair<std::string, ModelConfig>> runs;
  if (!a.beta_sweep.empty()) {
    for (double b : parse_reals(a.beta_sweep, "--beta-sweep")) {
      ModelConfig c = base;
      c.variant = Variant::Generic;
      c.beta = b;
      std::ostringstream label;
      label << "beta=" << b;
      runs.emplace_back(label.str(), c);
    }
  } else {
    for (const auto& v : split_csv(a.variants)) runs.emplace_back(v, suite_config(base, v));
  }
  if (runs.empty()) throw std::invalid_argument("nothing to run");

  const auto prep = load_prepared(a.bundle);
  const auto training = prep.training_bundle();
  std::vector<MetricsReport> reports;
  for (auto seed : seeds) {
    for (const auto& [label, c0] : runs) {
      ModelConfig c = c0;
      c.seed = seed;
      if (!a.quiet) err << "training " << label << " (seed " << seed << ")\n";
      const auto res = train<double>(training, c);
      auto rep = evaluate(res.params, prep.loo, training, ks, c.inference_mode, seed);
      rep.variant = label;
      reports.push_back(std::move(rep));
    }
  }

  // Mean over seeds per label.
  std::vector<MetricsReport> means;
  for (const auto& [label, c] : runs) {
    MetricsReport mr;
    mr.variant = label;
    mr.protocol = "mean";
    mr.ks = ks;
    mr.hr.assign(ks.size(), 0.0);
    mr.ndcg.assign(ks.size(), 0.0);
    for (const auto& r : reports) {
      if (r.variant != label) continue;
      mr.m_evaluated = r.m_evaluated;
      for (std::size_t i = 0; i < ks.size(); ++i) {
        mr.hr[i] += r.hr[i] / static_cast<double>(seeds.size());
        mr.ndcg[i] += r.ndcg[i] / static_cast<double>(seeds.size());
      }
    }
    means.push_back(std::move(mr));
  }
  auto all = reports;
  all.insert(all.end(), means.begin(), means.end());

  fs::create_directories(a.out);
  Manifest m("ablate", argv);
  m.j["config_path"] = f.config_path;
  m.j["config"] = base.to_json();
  m.j["dataset_fingerprint"] = bundle_fingerprint(a.bundle);
  m.j["seeds"] = seeds;
  write_metrics(all, (fs::path(a.out) / "ablation").string(), m);
  print_reports(out, means);

  auto find = [&](const std::string& n) -> const MetricsReport* {
    for (const auto& r : means)
      if (r.variant == n) return &r;
    return nullptr;
  };
  const auto* g = find("generic");
  const auto* nm = find("no-mmd");
  if (g && nm && std::find(ks.begin(), ks.end(), 10) != ks.end() && nm->hr_at(10) > 0) {
    out << "generic vs no-mmd HR@10 relative gain: " << fixed(100.0 * (g->hr_at(10) / nm->hr_at(10) - 1.0), 2)
        << "%\n";
  }
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> echo(argv, argv + argc);

  CLI::App app{"Cross-domain linked-VAE recommender"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  PrepareArgs pa;
  auto* prep = app.add_subcommand("prepare", "ingest ratings, split domains, freeze evaluation splits");
  prep->add_option("--ratings", pa.ratings, "ratings file")->required();
  prep->add_option("--items", pa.items, "item label file")->required();
  prep->add_option("--format", pa.format, "movielens-dat | csv");
  prep->add_option("--source-labels", pa.source_labels, "comma-separated labels")->required();
  prep->add_option("--target-labels", pa.target_labels, "comma-separated labels")->required();
  prep->add_option("--min-rating", pa.min_rating, "positive threshold (default 4)");
  prep->add_option("--min-target", pa.min_target, "minimum target positives per user (default 2)");
  prep->add_option("--seed", pa.seed);
  prep->add_option("--out", pa.out, "bundle directory")->required();
  prep->add_option("--aux", pa.aux, "auxiliary user vectors (csv)");
  prep->add_option("--aux-dim", pa.aux_dim);
  prep->add_option("--holdout", pa.holdout, "random | latest");
  prep->add_option("--cold-fraction", pa.cold_fraction);

  TrainFlags tf;
  std::string t_bundle, t_out;
  bool t_quiet = false;
  auto* tr = app.add_subcommand("train", "train one variant and write a checkpoint");
  tr->add_option("--bundle", t_bundle)->required();
  tr->add_option("--out", t_out, "checkpoint path")->required();
  tr->add_flag("--quiet", t_quiet);
  tf.add(tr, true);

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--model", ea.model)->required();
  ev->add_option("--bundle", ea.bundle)->required();
  ev->add_option("--ks", ea.ks);
  ev->add_option("--protocol", ea.protocol, "standard | degrade | coldstart");
  ev->add_option("--fractions", ea.fractions, "kept target fractions for degrade");
  ev->add_option("--inference", ea.mode, "mean | sample");
  ea.seed_opt = ev->add_option("--seed", ea.seed);
  ev->add_option("--out", ea.out, "output prefix (.json/.csv)")->required();

  TrainFlags af;
  AblateArgs aa;
  auto* ab = app.add_subcommand("ablate", "train and compare variants under shared splits and seeds");
  ab->add_option("--bundle", aa.bundle)->required();
  ab->add_option("--variants", aa.variants);
  ab->add_option("--seeds", aa.seeds, "comma-separated seeds (default: --seed)");
  ab->add_option("--beta-sweep", aa.beta_sweep, "comma-separated beta values for the generic model");
  ab->add_option("--ks", aa.ks);
  ab->add_option("--out", aa.out, "output directory")->required();
  ab->add_flag("--quiet", aa.quiet);
  af.add(ab, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*prep) return cmd_prepare(pa, out);
    if (*tr) return cmd_train(tf, t_bundle, t_out, t_quiet, echo, out, err);
    if (*ev) return cmd_eval(ea, echo, out);
    if (*ab) return cmd_ablate(af, aa, echo, out, err);
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ShapeError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::invalid_argument& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const nlohmann::json::exception& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv;
  argv.push_back("xdvae");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace xdvae
