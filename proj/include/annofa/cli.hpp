#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "CLI11.hpp"
#include "evaluation.hpp"
#include "inference.hpp"
#include "io.hpp"
#include "model.hpp"
#include "synthetic.hpp"
#include "types.hpp"

namespace annofa::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Flags shared by every subcommand.
struct GlobalFlags {
  std::uint64_t seed = 42;
  int threads = 1;
  int verbosity = 0;
  std::string out = ".";
};

namespace detail {

inline std::string env_name(const std::string& flag) {
  std::string s = "ANNOFA_";
  for (char c : flag) s += c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

// Adds "--name" with an ANNOFA_NAME environment override and the default shown in --help.
template <typename T>
CLI::Option* flag(CLI::App* app, const std::string& name, T& target, const std::string& help) {
  return app->add_option("--" + name, target, help)->envname(env_name(name))->capture_default_str();
}

inline void add_globals(CLI::App* app, GlobalFlags& g, bool with_out = true) {
  flag(app, "seed", g.seed, "random seed");
  flag(app, "threads", g.threads, "upper bound on worker threads")->check(CLI::PositiveNumber);
  app->add_flag("-v,--verbose", g.verbosity, "progress on stderr (repeat for more)")->envname(env_name("verbose"));
  if (with_out) flag(app, "out", g.out, "output directory");
}

struct TrainFlags {
  TrainOptions train;
  FactorConfig config;
  std::string format = "auto";
  double lr_decay_factor = 1.0;
};

inline void add_train_options(CLI::App* app, TrainFlags& f) {
  flag(app, "slab-annotated", f.config.slab_annotated, "slab width for annotated genes and dense factors");
  flag(app, "slab-unannotated", f.config.slab_unannotated, "slab width for unannotated genes and sparse factors");
  flag(app, "tau0", f.config.tau0, "scale of the half-Cauchy prior on the global shrinkage");
  flag(app, "noise-shape", f.config.noise_prior_shape, "inverse-gamma shape of the residual variance prior");
  flag(app, "noise-rate", f.config.noise_prior_rate, "inverse-gamma rate of the residual variance prior");
  flag(app, "max-iters", f.train.max_iters, "maximum optimizer steps")->check(CLI::PositiveNumber);
  flag(app, "lr", f.train.learning_rate, "Adam learning rate")->check(CLI::PositiveNumber);
  flag(app, "lr-decay", f.lr_decay_factor, "learning-rate factor applied every 100 steps (1 disables)")
      ->check(CLI::Range(0.0, 1.0));
  flag(app, "batch-size", f.train.batch_size, "rows per step when batching (0: batch threshold)");
  flag(app, "batch-threshold", f.train.batch_threshold, "batch only when samples exceed this");
  flag(app, "mc-samples", f.train.n_mc, "Monte Carlo draws per ELBO estimate")->check(CLI::PositiveNumber);
  flag(app, "checkpoint-every", f.train.checkpoint_every, "steps between trace records")->check(CLI::PositiveNumber);
  flag(app, "tol", f.train.convergence_tol, "relative ELBO change that counts as converged");
  flag(app, "window", f.train.convergence_window, "trace records per convergence window (0 disables)");
  flag(app, "threshold", f.train.active_threshold, "|w| above which a loading counts as active");
}

inline TrainOptions finish(const TrainFlags& f, const GlobalFlags& g) {
  TrainOptions o = f.train;
  o.seed = g.seed;
  o.lr_decay = f.lr_decay_factor < 1.0;
  o.lr_decay_factor = f.lr_decay_factor;
  return o;
}

inline std::filesystem::path prepare_out(const std::string& dir) {
  std::filesystem::path p(dir);
  std::error_code ec;
  std::filesystem::create_directories(p, ec);
  if (!std::filesystem::is_directory(p)) throw Error("cannot create output directory '" + dir + "'");
  return p;
}

inline ExpressionMatrix load_data(const std::string& path, const std::string& format) {
  if (format == "csv") return read_matrix(path, MatrixFormat::csv);
  if (format == "mtx") return read_matrix(path, MatrixFormat::matrix_market);
  return read_matrix(path);
}

inline void apply_threads(int threads) { Eigen::setNbThreads(threads); }

inline void progress(const GlobalFlags& g, TrainOptions& o) {
  if (g.verbosity <= 0) return;
  o.on_checkpoint = [every = g.verbosity > 1 ? 1 : 10](const Checkpoint& c) {
    static long n = 0;
    if (n++ % every == 0) {
      std::fprintf(stderr, "iter %ld elbo %.6g", c.iteration, c.elbo);
      if (c.f1) std::fprintf(stderr, " f1 %.4f", *c.f1);
      std::fprintf(stderr, "\n");
    }
  };
}

// Timings vary run to run; keep them out of the deterministic outputs.
inline void write_timing_log(const std::filesystem::path& path, const TrainingTrace& trace) {
  std::ofstream log(path);
  write_trace_csv(trace, log, true);
}

inline TrainedModel strip_timings(TrainedModel m) {
  for (auto& c : m.trace.checkpoints) c.seconds = 0.0;
  return m;
}

inline void write_scores(const std::filesystem::path& path, const TrainedModel& m, const ExpressionMatrix& y) {
  write_csv_table(m.x_mean, y.sample_names, m.mask.factor_names, path.string(), "sample");
}

inline std::vector<double> parse_levels(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    out.push_back(annofa::detail::parse_number(item, "level list"));
  }
  if (out.empty()) throw ConfigError("empty level list '" + s + "'");
  return out;
}

/// Truth in a model's column layout: columns whose factor name matches a set
/// get its members, all others stay inactive.
inline BoolMatrix truth_for(const TrainedModel& m, const GeneSetCollection& sets,
                            const std::vector<std::string>& feature_names) {
  BoolMatrix truth = BoolMatrix::Constant(m.n_features(), m.n_factors(), false);
  std::unordered_map<std::string, Index> where;
  for (std::size_t g = 0; g < feature_names.size(); ++g) where.emplace(feature_names[g], static_cast<Index>(g));
  for (const auto& s : sets.sets)
    for (Index k = 0; k < m.n_factors(); ++k)
      if (m.mask.factor_names[k] == s.name)
        for (const auto& member : s.members)
          if (auto it = where.find(member); it != where.end()) truth(it->second, k) = true;
  return truth;
}

inline void require_features(const TrainedModel& m, const ExpressionMatrix& y) {
  if (m.n_features() != y.n_features())
    throw ShapeError("model has " + std::to_string(m.n_features()) + " features, data has " +
                     std::to_string(y.n_features()));
}

inline std::string fmt(double v, const char* spec = "%.6g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

struct SimulateArgs {
  SyntheticSpec spec;
  double noise_fraction = 0.0;
  double redundant = 0.0;
};

inline void run_simulate(const SimulateArgs& a, const GlobalFlags& g) {
  SyntheticSpec spec = a.spec;
  spec.seed = g.seed;
  const auto out = detail::prepare_out(g.out);
  const auto d = generate(spec);
  write_csv_matrix(d.y, (out / "y.csv").string());
  std::vector<std::string> factors = d.mask_true.factor_names;
  write_csv_table(d.w_true, d.y.feature_names, factors, (out / "w_true.csv").string(), "feature");
  write_csv_table(d.x_true, d.y.sample_names, factors, (out / "x_true.csv").string(), "sample");
  write_gmt(mask_to_gene_sets(d.mask_true, d.y.feature_names), (out / "mask_true.gmt").string());
  if (a.noise_fraction > 0.0 || a.redundant > 0.0) {
    const std::uint64_t s = derive_seed(g.seed, 0x70726f72ULL);
    auto prior = add_redundant_factors(inject_noise(d.mask_true, a.noise_fraction, s), a.redundant, s);
    write_gmt(mask_to_gene_sets(prior, d.y.feature_names), (out / "mask_prior.gmt").string());
  }
}

struct TrainArgs {
  std::string data, gmt;
  Index min_genes = 15;
  Index n_sparse = 0, n_dense = 0;
  bool standardize = false;
  Index top_weights = 10;
  detail::TrainFlags flags;
};

inline void run_train(const TrainArgs& a, const GlobalFlags& g) {
  detail::apply_threads(g.threads);
  const auto out = detail::prepare_out(g.out);
  ExpressionMatrix y = detail::load_data(a.data, a.flags.format);
  if (a.standardize) {
    auto st = standardize(y);
    for (const auto& f : st.dropped) std::fprintf(stderr, "warning: dropped constant feature '%s'\n", f.c_str());
    y = std::move(st.y);
    write_csv_matrix(y, (out / "y_standardized.csv").string());
  }
  const auto sets = read_gmt(a.gmt);
  const auto mask = build_mask(sets, y.feature_names, a.min_genes, a.n_sparse, a.n_dense);
  const auto config = mask.matching_config(a.flags.config);
  TrainOptions opts = detail::finish(a.flags, g);
  detail::progress(g, opts);
  TrainedModel model = fit(y, mask, config, opts);

  detail::write_timing_log(out / "train.log", model.trace);
  model = detail::strip_timings(std::move(model));
  save_model(model, (out / "model.json").string());
  {
    std::ofstream t(out / "trace.csv");
    write_trace_csv(model.trace, t);
  }
  {
    std::ofstream r(out / "report.csv");
    write_factor_report(rank_factors(y, model, model.n_factors(), opts.active_threshold, a.top_weights), r);
  }
  detail::write_scores(out / "scores.csv", model, y);
  write_gmt(refined_gene_sets(model, y.feature_names, opts.active_threshold), (out / "refined.gmt").string());
}

struct EvaluateArgs {
  std::string model, data, format = "auto", truth_gmt, w_true, x_true;
  double threshold = 0.1;
};

inline void run_evaluate(const EvaluateArgs& a, const GlobalFlags& g, std::ostream& os) {
  detail::apply_threads(g.threads);
  const auto out = detail::prepare_out(g.out);
  const TrainedModel m = load_model(a.model);
  const ExpressionMatrix y = detail::load_data(a.data, a.format);
  detail::require_features(m, y);
  if (m.n_samples() != y.n_samples()) throw ShapeError("model and data sample counts differ");

  std::vector<std::pair<std::string, double>> metrics;
  std::vector<std::string> col_f1(static_cast<std::size_t>(m.n_factors()));
  std::vector<std::string> col_match(col_f1.size()), col_corr(col_f1.size()), col_auroc(col_f1.size());
  const auto annotated = m.mask.columns_of(FactorKind::annotated);

  if (!a.truth_gmt.empty()) {
    const BoolMatrix truth = detail::truth_for(m, read_gmt(a.truth_gmt), y.feature_names);
    const auto f1 = mask_f1(truth, m.w_mean, a.threshold, annotated);
    metrics.emplace_back("pooled_f1", f1.overall);
    for (std::size_t j = 0; j < annotated.size(); ++j)
      col_f1[static_cast<std::size_t>(annotated[j])] = detail::fmt(f1.per_factor[annotated[j]]);
  }
  std::vector<FactorMatch> matches;
  if (!a.w_true.empty()) {
    const auto wt = read_matrix(a.w_true, MatrixFormat::csv);
    if (wt.n_samples() != m.n_features()) throw ShapeError("w_true rows do not match model features");
    matches = match_factors(wt.data, m.w_mean);
    double identity = 0.0;
    for (const auto& fm : matches) {
      col_match[static_cast<std::size_t>(fm.learned_index)] = std::to_string(fm.true_index);
      col_corr[static_cast<std::size_t>(fm.learned_index)] = detail::fmt(fm.sign * fm.abs_corr);
      identity += fm.true_index == fm.learned_index;
    }
    metrics.emplace_back("identity_fraction", matches.empty() ? 0.0 : identity / static_cast<double>(matches.size()));
  }
  if (!a.x_true.empty()) {
    if (matches.empty()) throw ConfigError("--x-true needs --w-true to pair factors");
    const auto xt = read_matrix(a.x_true, MatrixFormat::csv);
    if (xt.n_samples() != m.n_samples()) throw ShapeError("x_true rows do not match model samples");
    double sum = 0.0;
    for (const auto& fm : matches) {
      const Vector truth = xt.data.col(fm.true_index);
      Vector sorted = truth;
      std::sort(sorted.begin(), sorted.end());
      const double median = sorted[sorted.size() / 2];
      std::vector<bool> labels(static_cast<std::size_t>(truth.size()));
      for (Index i = 0; i < truth.size(); ++i) labels[static_cast<std::size_t>(i)] = truth[i] > median;
      const Vector scores = fm.sign * m.x_mean.col(fm.learned_index);
      const double au = auroc(scores, labels);
      col_auroc[static_cast<std::size_t>(fm.learned_index)] = detail::fmt(au);
      sum += au;
    }
    metrics.emplace_back("mean_auroc", sum / static_cast<double>(matches.size()));
  }
  metrics.emplace_back("mean_sigma2", m.sigma2.mean());
  metrics.emplace_back("tau_mean", m.tau_mean);

  std::ofstream mf(out / "metrics.csv");
  mf << "metric,value\n";
  for (const auto& [k, v] : metrics) mf << k << ',' << annofa::detail::fmt_double(v) << '\n';
  std::ofstream ff(out / "evaluation.csv");
  ff << "index,name,kind,r2,f1,matched_true,corr,auroc\n";
  for (Index k = 0; k < m.n_factors(); ++k) {
    const auto s = static_cast<std::size_t>(k);
    ff << k << ',' << m.mask.factor_names[s] << ',' << to_string(m.mask.kinds[s]) << ','
       << annofa::detail::fmt_double(factor_r2(y, m, k)) << ',' << col_f1[s] << ',' << col_match[s] << ','
       << col_corr[s] << ',' << col_auroc[s] << '\n';
  }
  for (const auto& [k, v] : metrics) os << k << '\t' << detail::fmt(v) << '\n';
}

struct RankArgs {
  std::string model, data, format = "auto";
  Index top = 10, top_weights = 5;
  double threshold = 0.1;
  bool write_file = false;
};

inline void run_rank(const RankArgs& a, const GlobalFlags& g, std::ostream& os) {
  detail::apply_threads(g.threads);
  const TrainedModel m = load_model(a.model);
  const ExpressionMatrix y = detail::load_data(a.data, a.format);
  detail::require_features(m, y);
  auto reports = rank_factors(y, m, a.top, a.threshold, a.top_weights);
  os << "rank\tfactor\tkind\tr2\tactive\ttop_features\n";
  for (std::size_t r = 0; r < reports.size(); ++r) {
    const auto& f = reports[r];
    os << r + 1 << '\t' << f.name << '\t' << to_string(f.kind) << '\t' << detail::fmt(f.r2, "%.4f") << '\t'
       << f.n_active << '\t';
    for (std::size_t j = 0; j < f.top_weights.size(); ++j) os << (j ? "," : "") << f.top_weights[j].first;
    os << '\n';
  }
  if (a.write_file) {
    const auto out = detail::prepare_out(g.out);
    std::ofstream r(out / "rank.csv");
    write_factor_report(reports, r);
  }
}

struct ImputeArgs {
  std::string model, data, format = "auto";
};

inline void run_impute(const ImputeArgs& a, const GlobalFlags& g) {
  detail::apply_threads(g.threads);
  const auto out = detail::prepare_out(g.out);
  const TrainedModel m = load_model(a.model);
  const ExpressionMatrix y = detail::load_data(a.data, a.format);
  write_csv_matrix(impute(m, y), (out / "imputed.csv").string());
}

struct ExperimentArgs {
  SyntheticSpec spec;
  std::string noise_levels = "0,0.1,0.2";
  std::string redundant_levels = "0,0.1,0.2,0.5";
  Index n_sparse = 1, n_dense = 1;
  detail::TrainFlags flags;
};

inline void run_experiment(const ExperimentArgs& a, const GlobalFlags& g) {
  detail::apply_threads(g.threads);
  const auto out = detail::prepare_out(g.out);
  SyntheticSpec spec = a.spec;
  spec.seed = g.seed;
  ExperimentOptions eo;
  eo.train = detail::finish(a.flags, g);
  detail::progress(g, eo.train);
  eo.config = a.flags.config;
  eo.n_sparse = a.n_sparse;
  eo.n_dense = a.n_dense;
  auto report = noise_experiment(spec, detail::parse_levels(a.noise_levels), detail::parse_levels(a.redundant_levels), eo);
  {
    std::ofstream log(out / "experiment.log");
    log << "noise,redundant,iteration,seconds\n";
    for (const auto& c : report.cells)
      for (const auto& cp : c.trace.checkpoints)
        log << c.noise << ',' << c.redundant << ',' << cp.iteration << ',' << detail::fmt(cp.seconds, "%.6f") << '\n';
  }
  std::ofstream t(out / "experiment.csv");
  write_experiment_table(report, t);
  std::ofstream s(out / "summary.csv");
  write_experiment_summary(report, s);
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

/// Parses argv and runs one subcommand. Returns 0 on success, 1 on a runtime
/// failure and 2 on a usage error.
inline int run(int argc, const char* const* argv, std::ostream& os = std::cout, std::ostream& es = std::cerr) {
  CLI::App app{"Sparse factor analysis with annotation-guided horseshoe priors", "annofa"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  GlobalFlags g;

  SimulateArgs sim;
  auto* c_sim = app.add_subcommand("simulate", "generate a synthetic dataset with known factors");
  detail::add_globals(c_sim, g);
  detail::flag(c_sim, "n", sim.spec.n_samples, "samples")->check(CLI::PositiveNumber);
  detail::flag(c_sim, "g", sim.spec.n_features, "features")->check(CLI::PositiveNumber);
  detail::flag(c_sim, "k", sim.spec.n_factors, "factors")->check(CLI::PositiveNumber);
  detail::flag(c_sim, "loading-sd", sim.spec.loading_sd, "standard deviation of generated loadings");
  detail::flag(c_sim, "min-abs-loading", sim.spec.min_abs_loading, "loadings below this magnitude are zeroed");
  detail::flag(c_sim, "sparsity-min", sim.spec.sparsity_min, "lower bound of the per-factor zeroed fraction");
  detail::flag(c_sim, "sparsity-max", sim.spec.sparsity_max, "upper bound of the per-factor zeroed fraction");
  detail::flag(c_sim, "noise-variance", sim.spec.noise_variance, "observation noise variance");
  detail::flag(c_sim, "noise-fraction", sim.noise_fraction, "annotation flip fraction for mask_prior.gmt");
  detail::flag(c_sim, "redundant", sim.redundant, "random extra sets, as a fraction of true factors");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "fit a model to data with gene-set annotations");
  detail::add_globals(c_train, g);
  detail::flag(c_train, "data", tr.data, "expression matrix (CSV or MatrixMarket)")->required();
  detail::flag(c_train, "gmt", tr.gmt, "gene sets in GMT format")->required();
  detail::flag(c_train, "format", tr.flags.format, "data format")->check(CLI::IsMember({"auto", "csv", "mtx"}));
  detail::flag(c_train, "min-genes", tr.min_genes, "minimum set members present in the data");
  detail::flag(c_train, "sparse", tr.n_sparse, "unannotated sparse factors");
  detail::flag(c_train, "dense", tr.n_dense, "unannotated dense factors");
  c_train->add_flag("--standardize", tr.standardize, "center and scale each feature first")
      ->envname(detail::env_name("standardize"));
  detail::flag(c_train, "top-weights", tr.top_weights, "features listed per factor in report.csv");
  detail::add_train_options(c_train, tr.flags);

  EvaluateArgs ev;
  auto* c_eval = app.add_subcommand("evaluate", "score a trained model against known structure");
  detail::add_globals(c_eval, g);
  detail::flag(c_eval, "model", ev.model, "model archive")->required();
  detail::flag(c_eval, "data", ev.data, "expression matrix")->required();
  detail::flag(c_eval, "format", ev.format, "data format")->check(CLI::IsMember({"auto", "csv", "mtx"}));
  detail::flag(c_eval, "truth-gmt", ev.truth_gmt, "true active sets, matched to factors by name");
  detail::flag(c_eval, "w-true", ev.w_true, "true loadings CSV (features x factors)");
  detail::flag(c_eval, "x-true", ev.x_true, "true factor states CSV (samples x factors)");
  detail::flag(c_eval, "threshold", ev.threshold, "|w| above which a loading counts as active");

  RankArgs rk;
  auto* c_rank = app.add_subcommand("rank", "print factors ordered by variance explained");
  detail::add_globals(c_rank, g);
  detail::flag(c_rank, "model", rk.model, "model archive")->required();
  detail::flag(c_rank, "data", rk.data, "expression matrix")->required();
  detail::flag(c_rank, "format", rk.format, "data format")->check(CLI::IsMember({"auto", "csv", "mtx"}));
  detail::flag(c_rank, "top", rk.top, "factors to print")->check(CLI::PositiveNumber);
  detail::flag(c_rank, "top-weights", rk.top_weights, "features listed per factor");
  detail::flag(c_rank, "threshold", rk.threshold, "|w| above which a loading counts as active");

  ImputeArgs im;
  auto* c_imp = app.add_subcommand("impute", "fill missing entries from the model reconstruction");
  detail::add_globals(c_imp, g);
  detail::flag(c_imp, "model", im.model, "model archive")->required();
  detail::flag(c_imp, "data", im.data, "expression matrix with missing entries")->required();
  detail::flag(c_imp, "format", im.format, "data format")->check(CLI::IsMember({"auto", "csv", "mtx"}));

  ExperimentArgs ex;
  ex.spec.n_samples = 2000;
  ex.spec.n_features = 500;
  auto* c_exp = app.add_subcommand("noise-experiment", "train on synthetic data under annotation noise");
  detail::add_globals(c_exp, g);
  detail::flag(c_exp, "n", ex.spec.n_samples, "samples")->check(CLI::PositiveNumber);
  detail::flag(c_exp, "g", ex.spec.n_features, "features")->check(CLI::PositiveNumber);
  detail::flag(c_exp, "k", ex.spec.n_factors, "true factors")->check(CLI::PositiveNumber);
  detail::flag(c_exp, "noise-levels", ex.noise_levels, "comma-separated flip fractions");
  detail::flag(c_exp, "redundant-levels", ex.redundant_levels, "comma-separated redundant-set fractions");
  detail::flag(c_exp, "sparse", ex.n_sparse, "unannotated sparse factors");
  detail::flag(c_exp, "dense", ex.n_dense, "unannotated dense factors");
  detail::add_train_options(c_exp, ex.flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, os, es);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, os, es);
  } catch (const CLI::ParseError& e) {
    app.exit(e, os, es);
    return kExitUsage;
  }

  const bool rank_out = c_rank->count("--out") > 0;
  rk.write_file = rank_out;
  try {
    if (c_sim->parsed()) run_simulate(sim, g);
    else if (c_train->parsed()) run_train(tr, g);
    else if (c_eval->parsed()) run_evaluate(ev, g, os);
    else if (c_rank->parsed()) run_rank(rk, g, os);
    else if (c_imp->parsed()) run_impute(im, g);
    else if (c_exp->parsed()) run_experiment(ex, g);
  } catch (const std::exception& e) {
    es << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace annofa::cli
