// fmfa: command-line front end for the alignment losses, the toy trainer and
// the retrieval metrics.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "fmfa/fmfa.hpp"

namespace {

using nlohmann::ordered_json;

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

void print_json(const ordered_json& j) { std::cout << j.dump(2) << '\n'; }

fmfa::RunConfig resolve_config(const std::string& path, const std::vector<std::string>& overrides) {
  fmfa::RunConfig cfg = path.empty() ? fmfa::RunConfig{} : fmfa::load_run_config(path);
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw fmfa::Error("--set expects key=value, got '" + kv + "'");
    fmfa::set_config_value(cfg, fmfa::detail::trim(std::string_view(kv).substr(0, eq)),
                           std::string_view(kv).substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

int run_synth(const fmfa::SynthConfig& cfg, const std::string& out_dir) {
  const auto ds = fmfa::synthesize_dataset(cfg);
  fmfa::write_synthetic(out_dir, ds);
  print_json({{"out", out_dir},
              {"identities", cfg.num_identities},
              {"pairs_per_split", cfg.num_identities * cfg.samples_per_id},
              {"dim", cfg.dim},
              {"tokens", cfg.tokens},
              {"patches", cfg.patches},
              {"noise", cfg.noise_sigma},
              {"seed", cfg.seed}});
  return 0;
}

int run_loss(const std::string& embeddings, const std::string& manifest, const fmfa::RunConfig& cfg,
             std::uint64_t head_seed) {
  const auto ds = fmfa::io::load_dataset(embeddings, manifest);
  std::size_t classes = 0;
  for (auto id : ds.set.identities) classes = std::max<std::size_t>(classes, id + 1);
  std::mt19937_64 rng(head_seed);
  const fmfa::ClassifierHead head{fmfa::random_matrix(classes, ds.set.text_globals.cols(), rng, 0.01),
                                  fmfa::Vector(classes)};

  ordered_json out;
  out["pairs"] = ds.set.size();
  out["sdm"] = fmfa::sdm_loss(ds.set, cfg.hp).value;
  out["asdm"] = fmfa::asdm_loss(ds.set, cfg.hp).value;
  if (ds.locals) out["efa"] = fmfa::efa_loss(*ds.locals, cfg.hp).value;
  out["id"] = fmfa::id_loss(ds.set.text_globals, ds.set.image_globals, head, ds.set.identities).value;

  fmfa::LossSwitches switches = cfg.trainer.switches;
  if (!ds.locals) switches.efa = false;
  const auto total = fmfa::total_loss(ds.set, ds.locals ? &*ds.locals : nullptr, &head, cfg.hp, switches);
  out["total"] = total.value;
  out["switches"] = {{"global_loss", fmfa::to_string(switches.global)}, {"efa", switches.efa}, {"id", switches.id}};
  print_json(out);
  return 0;
}

int run_gradcheck(std::uint64_t seed, std::size_t trials, double h, double tolerance) {
  ordered_json out;
  out["seed"] = seed;
  out["h"] = h;
  out["tolerance"] = tolerance;
  double worst = 0.0;
  auto& runs = out["runs"] = ordered_json::array();
  for (std::size_t t = 0; t < trials; ++t) {
    ordered_json run;
    run["seed"] = seed + t;
    for (const auto& [name, res] : fmfa::run_gradcheck_suite(seed + t, h)) {
      run[name] = {{"max_rel_error", res.max_relative_error}, {"coordinates", res.coordinates_checked}};
      worst = std::max(worst, res.max_relative_error);
    }
    runs.push_back(std::move(run));
  }
  out["max_rel_error"] = worst;
  out["pass"] = worst < tolerance;
  print_json(out);
  return worst < tolerance ? 0 : kExitRuntime;
}

int run_train(const fmfa::RunConfig& cfg, const std::string& out_path) {
  const auto report = fmfa::train_toy(cfg);
  const auto j = fmfa::to_json(report);
  if (out_path.empty() || out_path == "-") {
    print_json(j);
  } else {
    std::ofstream out(out_path);
    if (!out) throw fmfa::Error("cannot open '" + out_path + "' for writing");
    out << j.dump(2) << '\n';
    const auto& last = report.final_epoch();
    print_json({{"out", out_path},
                {"epochs", report.epochs.size()},
                {"initial_total", report.initial_total},
                {"final_total", last.total},
                {"rank1", last.retrieval.rank1},
                {"map", last.retrieval.map}});
  }
  return 0;
}

int run_eval(const std::string& embeddings, const std::string& manifest) {
  const auto ds = fmfa::io::load_dataset(embeddings, manifest);
  const auto sim = fmfa::cosine_similarity_matrix(ds.set.text_globals, ds.set.image_globals);
  print_json(fmfa::to_json(fmfa::evaluate_retrieval(sim, ds.set.identities, ds.set.identities)));
  return 0;
}

int run_bench(const std::vector<std::size_t>& ms, const std::vector<std::size_t>& ls, std::size_t dim,
              std::uint64_t seed) {
  std::cout << "method,M,L,post_entries_touched\n";
  for (const auto& row : fmfa::complexity_probe(ms, ls, dim, seed))
    std::cout << row.method << ',' << row.queries << ',' << row.candidates << ',' << row.counts.post_entries_touched
              << '\n';
  return 0;
}

int run_sparsify(const std::string& embeddings, const std::string& manifest, std::size_t sample,
                 std::optional<double> sigma, const fmfa::SynthConfig& synth) {
  fmfa::Matrix tokens;
  fmfa::Matrix patches;
  if (!embeddings.empty()) {
    const auto ds = fmfa::io::load_dataset(embeddings, manifest);
    if (!ds.locals) throw fmfa::Error("'" + embeddings + "' has no local features");
    if (sample >= ds.locals->size())
      throw fmfa::Error(fmfa::detail::concat("sample ", sample, " out of range (", ds.locals->size(), " pairs)"));
    tokens = ds.locals->samples[sample].tokens;
    patches = ds.locals->samples[sample].patches;
  } else {
    const auto ds = fmfa::synthesize_dataset(synth);
    const auto train = fmfa::io::assemble_dataset(ds.train.file, ds.train.manifest);
    if (sample >= train.locals->size())
      throw fmfa::Error(fmfa::detail::concat("sample ", sample, " out of range (", train.locals->size(), " pairs)"));
    tokens = train.locals->samples[sample].tokens;
    patches = train.locals->samples[sample].patches;
  }
  const auto agg = fmfa::build_joint(tokens, patches, sigma);
  std::printf("stage,token,patch,value\n");
  auto dump = [](const char* stage, const fmfa::Matrix& m) {
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t j = 0; j < m.cols(); ++j) std::printf("%s,%zu,%zu,%.17g\n", stage, i, j, m(i, j));
  };
  dump("raw", agg.raw);
  dump("normalized", agg.normalized);
  dump("sparse", agg.sparse);
  dump("weights", agg.weights);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fine-grained cross-modal alignment losses, toy trainer and retrieval metrics"};
  app.require_subcommand(1);

  fmfa::SynthConfig synth;
  std::string out_dir;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic identity-clustered dataset");
  synth_cmd->add_option("--out", out_dir, "Output directory")->required();
  synth_cmd->add_option("--ids", synth.num_identities, "Number of identities")->capture_default_str();
  synth_cmd->add_option("--per-id", synth.samples_per_id, "Pairs per identity and split")->capture_default_str();
  synth_cmd->add_option("--dim", synth.dim, "Feature width")->capture_default_str();
  synth_cmd->add_option("--tokens", synth.tokens, "Tokens per text")->capture_default_str();
  synth_cmd->add_option("--patches", synth.patches, "Patches per image")->capture_default_str();
  synth_cmd->add_option("--noise", synth.noise_sigma, "Gaussian noise sigma")->capture_default_str();
  synth_cmd->add_option("--seed", synth.seed, "Random seed")->capture_default_str();

  std::string embeddings, manifest, config_path;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  auto* loss_cmd = app.add_subcommand("loss", "Compute component and total losses for a dataset");
  loss_cmd->add_option("--embeddings", embeddings, "FMEB embedding file")->required()->check(CLI::ExistingFile);
  loss_cmd->add_option("--manifest", manifest, "JSON-lines manifest")->required()->check(CLI::ExistingFile);
  loss_cmd->add_option("--config", config_path, "Run configuration file")->check(CLI::ExistingFile);
  loss_cmd->add_option("--set", overrides, "Override a configuration key (key=value)");
  loss_cmd->add_option("--seed", seed, "Seed of the random identity head")->capture_default_str();

  std::size_t trials = 1;
  double h = 1e-5;
  double tolerance = 1e-4;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Check analytic gradients against central differences");
  grad_cmd->add_option("--seed", seed, "First fixture seed")->capture_default_str();
  grad_cmd->add_option("--trials", trials, "Number of consecutive seeds")->capture_default_str()->check(CLI::PositiveNumber);
  grad_cmd->add_option("--step", h, "Finite-difference step")->capture_default_str()->check(CLI::PositiveNumber);
  grad_cmd->add_option("--tolerance", tolerance, "Maximum relative error")->capture_default_str();

  std::string train_out;
  std::optional<std::uint64_t> train_seed;
  auto* train_cmd = app.add_subcommand("train", "Train the toy encoders and write a TrainReport");
  train_cmd->add_option("--config", config_path, "Run configuration file")->check(CLI::ExistingFile);
  train_cmd->add_option("--set", overrides, "Override a configuration key (key=value)");
  train_cmd->add_option("--seed", train_seed, "Seed for parameters, batching and data");
  train_cmd->add_option("--out", train_out, "Report path ('-' for stdout)");

  auto* eval_cmd = app.add_subcommand("eval", "Text-to-image retrieval metrics for a dataset");
  eval_cmd->add_option("--embeddings", embeddings, "FMEB embedding file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--manifest", manifest, "JSON-lines manifest")->required()->check(CLI::ExistingFile);

  std::vector<std::size_t> bench_m{8, 64};
  std::vector<std::size_t> bench_l{4, 8, 16};
  std::size_t bench_dim = 16;
  auto* bench_cmd = app.add_subcommand("bench", "Hard vs soft coding work counters as CSV");
  bench_cmd->add_option("--M", bench_m, "Query row counts")->delimiter(',')->check(CLI::PositiveNumber);
  bench_cmd->add_option("--L", bench_l, "Candidate row counts")->delimiter(',')->check(CLI::PositiveNumber);
  bench_cmd->add_option("--dim", bench_dim, "Feature width")->capture_default_str()->check(CLI::PositiveNumber);
  bench_cmd->add_option("--seed", seed, "Random seed")->capture_default_str();

  std::size_t sample = 0;
  std::optional<double> sigma;
  fmfa::SynthConfig sparsify_synth;
  auto* sparsify_cmd = app.add_subcommand("sparsify", "Dump the sparse aggregation stages of one pair as CSV");
  sparsify_cmd->add_option("--embeddings", embeddings, "FMEB embedding file with local features")
      ->check(CLI::ExistingFile);
  auto* manifest_opt = sparsify_cmd->add_option("--manifest", manifest, "JSON-lines manifest")->check(CLI::ExistingFile);
  sparsify_cmd->get_option("--embeddings")->needs(manifest_opt);
  sparsify_cmd->add_option("--sample", sample, "Pair index")->capture_default_str();
  sparsify_cmd->add_option("--sigma", sigma, "Sparsity threshold (default 1/N)")->check(CLI::PositiveNumber);
  sparsify_cmd->add_option("--seed", sparsify_synth.seed, "Seed of the synthetic pair when no files are given");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (*synth_cmd) return run_synth(synth, out_dir);
    if (*loss_cmd) return run_loss(embeddings, manifest, resolve_config(config_path, overrides), seed);
    if (*grad_cmd) return run_gradcheck(seed, trials, h, tolerance);
    if (*train_cmd) {
      if (train_seed) {
        overrides.push_back("seed=" + std::to_string(*train_seed));
        overrides.push_back("data_seed=" + std::to_string(*train_seed));
      }
      return run_train(resolve_config(config_path, overrides), train_out);
    }
    if (*eval_cmd) return run_eval(embeddings, manifest);
    if (*bench_cmd) return run_bench(bench_m, bench_l, bench_dim, seed);
    if (*sparsify_cmd) return run_sparsify(embeddings, manifest, sample, sigma, sparsify_synth);
  } catch (const std::exception& e) {
    std::cerr << ordered_json{{"error", e.what()}}.dump() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
