#include "cone/cli.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "cone/analysis.hpp"
#include "cone/verify.hpp"
#include "format.hpp"
#include "tensor_json.hpp"

namespace cone {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

template <typename Config, typename Fn>
void visit_fields(Config &c, Fn &&f) {
  auto &t = c.train;
  f("lambda_sup", t.lambda_sup);
  f("lambda_dc", t.lambda_dc);
  f("tau_sup", t.tau_sup);
  f("tau_dc", t.tau_dc);
  f("bank_capacity", t.bank_capacity);
  f("top_n", t.top_n);
  f("batch_size", t.batch_size);
  f("epochs", t.epochs);
  f("warmup_epochs", t.warmup_epochs);
  f("base_lr", t.base_lr);
  f("weight_decay", t.weight_decay);
  f("sgd_momentum", t.sgd_momentum);
  f("ema_base_momentum", t.ema_base_momentum);
  f("seed", t.seed);
  f("use_ce", t.use_ce);
  f("use_sup_in", t.use_sup_in);
  f("use_sup_out", t.use_sup_out);
  f("use_dc", t.use_dc);
  f("classifier_on_projection", t.classifier_on_projection);
  f("contrastive_view", t.contrastive_view);
  f("jitter_std", t.jitter_std);
  f("backbone_dims", t.backbone_dims);
  f("proj_hidden", t.proj_hidden);
  f("proj_dim", t.proj_dim);

  auto &d = c.data;
  f("train_csv", d.train_csv);
  f("test_csv", d.test_csv);
  f("csv_has_header", d.csv_has_header);
  f("data_classes", d.data_classes);
  f("data_modes", d.data_modes);
  f("data_dim", d.data_dim);
  f("data_n_per_mode", d.data_n_per_mode);
  f("data_separation", d.data_separation);
  f("data_std", d.data_std);
  f("data_max_samples", d.data_max_samples);
  f("data_center_attempts", d.data_center_attempts);
  f("test_fraction", d.test_fraction);
}

template <typename T>
void read_value(const json &v, const std::string &key, T &out) {
  // Values built in code hold signed integers; parsed text holds unsigned ones.
  const auto non_negative_int = [](const json &x) {
    return x.is_number_unsigned() || (x.is_number_integer() && x.get<std::int64_t>() >= 0);
  };
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) throw ConfigError(key, "expected true or false");
  } else if constexpr (std::is_integral_v<T>) {
    if (!non_negative_int(v)) throw ConfigError(key, "expected a non-negative integer");
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw ConfigError(key, "expected a number");
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) throw ConfigError(key, "expected a string");
  } else {
    if (!v.is_array()) throw ConfigError(key, "expected an array of non-negative integers");
    for (const auto &e : v)
      if (!non_negative_int(e))
        throw ConfigError(key, "expected an array of non-negative integers");
  }
  out = v.get<T>();
}

bool is_known_key(std::string_view key) {
  bool found = false;
  RunConfig probe;
  visit_fields(probe, [&](const char *name, auto &) { found = found || key == name; });
  return found;
}

std::string iso_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Bad input from the user: exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum Exit { kOk = 0, kCheckFailed = 1, kUsage = 2, kAbort = 3 };

void setup_logging() {
  auto logger = spdlog::get("cone");
  if (!logger) logger = spdlog::stderr_color_st("cone");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(spdlog::level::info);
  if (const char *env = std::getenv("CONE_LOG")) {
    const auto level = spdlog::level::from_str(env);
    if (level == spdlog::level::off && std::string_view(env) != "off") {
      spdlog::warn("CONE_LOG={} not recognized; using info", env);
    } else {
      spdlog::set_level(level);
    }
  }
}

/// Config file (or defaults), then --set overrides, then --seed.
RunConfig resolve_config(const std::string &path, const std::vector<std::string> &sets,
                         std::optional<std::uint64_t> seed) {
  json doc = config_to_json(RunConfig{});
  if (!path.empty()) {
    json file;
    try {
      file = detail::read_json_file(path);
    } catch (const std::exception &e) {
      throw ConfigError("config", e.what());
    }
    if (!file.is_object()) throw ConfigError("config", path + " is not a JSON object");
    for (const auto &[key, value] : file.items()) {
      if (!is_known_key(key)) throw ConfigError(key, "unknown config key");
      doc[key] = value;
    }
  }
  for (const auto &s : sets) apply_override(doc, s);
  if (seed) doc["seed"] = *seed;
  return config_from_json(doc);
}

json make_manifest(const RunConfig &config, const fs::path &out_dir) {
  const std::uint64_t root = config.train.seed;
  json sub;
  for (const char *purpose : {"data", "init", "shuffle", "augment"})
    sub[purpose] = derive_seed(root, purpose);
  json artifacts;
  for (const char *name : {"config.json", "train.csv", "test.csv", "metrics.csv",
                           "metrics.jsonl", "checkpoint.json", "ema_checkpoint.json",
                           "bank.json"})
    artifacts[name] = (out_dir / name).string();
  return {{"tool", "cone"},
          {"version", std::string(kToolVersion)},
          {"config", config_to_json(config)},
          {"config_hash", config_hash(config)},
          {"seed", root},
          {"sub_seeds", sub},
          {"artifacts", artifacts},
          {"started_at", iso_now()},
          {"finished_at", nullptr},
          {"status", "running"}};
}

int cmd_train(const RunConfig &config, const fs::path &out_dir) {
  fs::create_directories(out_dir);
  auto [train, test] = load_run_data(config);
  spdlog::info("train {} samples, test {} samples, {} classes, dim {}", train.size(),
               test.size(), train.num_classes, train.dim());

  detail::write_json_file(config_to_json(config), out_dir / "config.json");
  write_csv(train, out_dir / "train.csv");
  write_csv(test, out_dir / "test.csv");
  json manifest = make_manifest(config, out_dir);
  detail::write_json_file(manifest, out_dir / "manifest.json");

  try {
    FitResult result = fit(config.train, train, test, [](const MetricsRow &r) {
      spdlog::info("epoch {:>3} total {:.4f} ce {:.4f} sup {:.4f} dc {:.4f} train {:.4f} test {:.4f}",
                   r.epoch, r.total, r.l_ce, r.l_sup, r.l_dc, r.train_acc, r.test_acc);
      spdlog::debug("epoch {} lr {} ema {} masked {}", r.epoch, r.lr, r.ema_momentum,
                    r.masked_fraction);
    });
    write_metrics_csv(result.metrics, out_dir / "metrics.csv");
    write_metrics_jsonl(result.metrics, out_dir / "metrics.jsonl");
    save_checkpoint(result.state.query, out_dir / "checkpoint.json");
    save_checkpoint(result.state.ema, out_dir / "ema_checkpoint.json");
    save_bank(result.state.bank, out_dir / "bank.json");
  } catch (const NumericAbort &e) {
    Dataset batch{e.batch(), e.labels(), train.num_classes};
    write_csv(batch, out_dir / "abort_batch.csv");
    manifest["status"] = "aborted";
    manifest["error"] = e.what();
    manifest["finished_at"] = iso_now();
    detail::write_json_file(manifest, out_dir / "manifest.json");
    spdlog::error("{} (batch saved to {})", e.what(), (out_dir / "abort_batch.csv").string());
    return kAbort;
  }

  manifest["status"] = "ok";
  manifest["finished_at"] = iso_now();
  detail::write_json_file(manifest, out_dir / "manifest.json");
  spdlog::info("run written to {}", out_dir.string());
  return kOk;
}

int cmd_gradcheck(const RunConfig &config, double tolerance, bool inject_fault) {
  MultimodeParams p = config.data.multimode();
  p.n_per_mode = std::max<std::size_t>(p.n_per_mode, 128 / (p.classes * p.modes_per_class) + 1);
  SeededRng rng(derive_seed(config.train.seed, "data"));
  const Dataset pool = gen_multimode(p, rng);
  const GradCheckFixture fixture = make_gradcheck_fixture(config.train, pool);

  GradCheckOptions options;
  options.tolerance = tolerance;
  if (inject_fault) {
    options.corrupt = [](ParamGrads &g) { g.classifier.values()[0] += 1e-2; };
  }
  std::vector<std::string> failed;
  for (const auto &c : gradcheck_suite(config.train, fixture, options)) {
    std::printf("%-8s max_rel_err %.3e  %s\n", c.component.c_str(),
                c.report.max_relative_error, c.report.passed ? "ok" : "FAIL");
    if (!c.report.passed) {
      failed.push_back(c.component);
      for (const auto &t : c.report.tensors)
        if (t.max_relative_error > tolerance)
          spdlog::debug("  {} rel {:.3e} abs {:.3e}", t.name, t.max_relative_error,
                        t.max_abs_error);
    }
  }
  if (!failed.empty()) {
    std::string names;
    for (const auto &f : failed) names += (names.empty() ? "" : ", ") + f;
    spdlog::error("gradient check failed (tolerance {:.1e}): {}", tolerance, names);
    return kCheckFailed;
  }
  std::printf("all components within %.1e\n", tolerance);
  return kOk;
}

struct AnalyzeInputs {
  std::string run_dir;
  std::string checkpoint;
  std::string bank;
  std::string data;
  std::string out;
  std::string config;
  std::vector<std::string> sets;
};

struct LoadedInputs {
  RunConfig config;
  ModelParams params;
  Dataset data;
  std::optional<MemoryBank> bank;
};

LoadedInputs load_inputs(const AnalyzeInputs &in, bool need_bank) {
  const fs::path run(in.run_dir);
  auto pick = [&](const std::string &explicit_path, const char *default_name) {
    if (!explicit_path.empty()) return fs::path(explicit_path);
    if (in.run_dir.empty()) {
      throw UsageError(std::string("--run or an explicit path for ") + default_name +
                       " is required");
    }
    return run / default_name;
  };

  std::string config_path = in.config;
  if (config_path.empty() && !in.run_dir.empty() && fs::exists(run / "config.json"))
    config_path = (run / "config.json").string();
  LoadedInputs out{resolve_config(config_path, in.sets, std::nullopt), {}, {}, std::nullopt};

  try {
    out.params = load_checkpoint(pick(in.checkpoint, "checkpoint.json"));
    CsvOptions csv;
    csv.has_header = in.data.empty() ? true : out.config.data.csv_has_header;
    csv.num_classes = out.params.shape.num_classes;
    out.data = load_csv(pick(in.data, "train.csv"), csv);
    if (need_bank) {
      out.bank = load_bank(pick(in.bank, "bank.json"));
      check_compatible(out.params, *out.bank);
    }
  } catch (const UsageError &) {
    throw;
  } catch (const std::exception &e) {
    throw UsageError(e.what());
  }
  if (out.data.dim() != out.params.shape.input_dim) {
    throw UsageError("dataset has " + std::to_string(out.data.dim()) +
                     " features, checkpoint expects " +
                     std::to_string(out.params.shape.input_dim));
  }
  return out;
}

fs::path output_path(const AnalyzeInputs &in, const char *default_name) {
  if (!in.out.empty()) return in.out;
  return in.run_dir.empty() ? fs::path(default_name) : fs::path(in.run_dir) / default_name;
}

int cmd_coefficients(const AnalyzeInputs &in, const std::vector<std::size_t> &sample_ids) {
  LoadedInputs li = load_inputs(in, true);
  std::vector<std::size_t> ids = sample_ids;
  if (ids.empty()) {
    ids.resize(std::min<std::size_t>(8, li.data.size()));
    std::iota(ids.begin(), ids.end(), 0);
  }
  std::vector<CoefficientTable> tables;
  try {
    tables = coefficient_report(li.params, li.data, *li.bank, ids, li.config.train);
  } catch (const std::out_of_range &e) {
    throw UsageError(e.what());
  }
  const fs::path path = output_path(in, "coefficients.csv");
  write_coefficients_csv(tables, path);
  std::size_t masked = 0;
  for (const auto &t : tables) masked += t.rows.empty() ? 1 : 0;
  spdlog::info("{} samples ({} without bank positives) -> {}", tables.size(), masked,
               path.string());
  return kOk;
}

int cmd_margins(const AnalyzeInputs &in) {
  LoadedInputs li = load_inputs(in, true);
  const MarginStats stats = margin_report(li.params, li.data, *li.bank, li.config.train);
  const fs::path path = output_path(in, "margins.csv");
  write_margins_csv(stats, path);
  std::printf("LogSumExp margin report (tau %s, top_n %zu)\n",
              detail::format_double(li.config.train.tau_sup).c_str(), li.config.train.top_n);
  std::printf("measured on this bank; the reference ranges m_pos ~ [0.06, 0.1] and\n"
              "m_neg ~ [0.3, 0.45] come from ImageNet-scale pools and are not targets\n");
  std::printf("samples %zu  skipped %zu\n", stats.samples.size(), stats.skipped);
  std::printf("m_pos mean %.6f min %.6f max %.6f\n", stats.m_pos.mean, stats.m_pos.min,
              stats.m_pos.max);
  std::printf("m_neg mean %.6f min %.6f max %.6f\n", stats.m_neg.mean, stats.m_neg.min,
              stats.m_neg.max);
  spdlog::info("margins -> {}", path.string());
  return kOk;
}

int cmd_export(const AnalyzeInputs &in) {
  LoadedInputs li = load_inputs(in, false);
  const fs::path path = output_path(in, "features.csv");
  export_features(li.params, li.data, path);
  spdlog::info("{} feature rows -> {}", li.data.size(), path.string());
  return kOk;
}

int cmd_gendata(const RunConfig &config, const fs::path &out) {
  SeededRng rng(derive_seed(config.train.seed, "data"));
  Dataset d = gen_multimode(config.data.multimode(), rng);
  if (config.data.data_max_samples != 0 && config.data.data_max_samples < d.size()) {
    std::vector<std::size_t> idx(config.data.data_max_samples);
    std::iota(idx.begin(), idx.end(), 0);
    d = subset(d, idx);
  }
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_csv(d, out);
  spdlog::info("{} samples -> {}", d.size(), out.string());
  return kOk;
}

}  // namespace

MultimodeParams DataConfig::multimode() const {
  return MultimodeParams{data_classes, data_modes, data_dim, data_n_per_mode,
                         data_separation, data_std, data_center_attempts};
}

json config_to_json(const RunConfig &config) {
  json doc = json::object();
  visit_fields(config, [&](const char *name, const auto &value) { doc[name] = value; });
  return doc;
}

RunConfig config_from_json(const json &doc) {
  if (!doc.is_object()) throw ConfigError("config", "expected a JSON object");
  for (const auto &[key, value] : doc.items())
    if (!is_known_key(key)) throw ConfigError(key, "unknown config key");
  RunConfig config;
  visit_fields(config, [&](const char *name, auto &field) {
    if (auto it = doc.find(name); it != doc.end()) read_value(*it, name, field);
  });
  try {
    config.train.validate();
  } catch (const std::invalid_argument &e) {
    const std::string msg = e.what();
    throw ConfigError(msg.substr(0, msg.find(':')), msg.substr(msg.find(':') + 2));
  }
  const DataConfig &d = config.data;
  if (!(d.test_fraction > 0.0 && d.test_fraction < 1.0))
    throw ConfigError("test_fraction", "must lie in (0, 1)");
  if (d.train_csv.empty()) {
    if (d.data_classes == 0 || d.data_modes == 0 || d.data_dim == 0 || d.data_n_per_mode == 0)
      throw ConfigError("data_classes", "synthetic data counts must all be positive");
    if (!(d.data_separation > 0.0)) throw ConfigError("data_separation", "must be > 0");
    if (!(d.data_std >= 0.0)) throw ConfigError("data_std", "must be >= 0");
  } else if (!d.test_csv.empty() && d.test_csv == d.train_csv) {
    throw ConfigError("test_csv", "must differ from train_csv");
  }
  return config;
}

void apply_override(json &doc, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError(std::string(assignment), "override must look like KEY=VALUE");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  if (!is_known_key(key)) throw ConfigError(key, "unknown config key");
  json value = json::parse(raw, nullptr, false);
  doc[key] = value.is_discarded() ? json(raw) : value;
}

std::string config_hash(const RunConfig &config) {
  return hex64(fnv1a64(config_to_json(config).dump()));
}

std::pair<Dataset, Dataset> load_run_data(const RunConfig &config) {
  const DataConfig &d = config.data;
  SeededRng rng(derive_seed(config.train.seed, "data"));
  Dataset all;
  if (d.train_csv.empty()) {
    all = gen_multimode(d.multimode(), rng);
  } else {
    CsvOptions csv{d.csv_has_header, 0};
    all = load_csv(d.train_csv, csv);
    if (!d.test_csv.empty()) {
      Dataset test = load_csv(d.test_csv, csv);
      const std::size_t classes = std::max(all.num_classes, test.num_classes);
      all.num_classes = test.num_classes = classes;
      return {std::move(all), std::move(test)};
    }
  }
  if (d.data_max_samples != 0 && d.data_max_samples < all.size()) {
    std::vector<std::size_t> idx(d.data_max_samples);
    std::iota(idx.begin(), idx.end(), 0);
    all = subset(all, idx);
  }
  return split(all, d.test_fraction, rng);
}

int run_cli(int argc, char **argv) {
  setup_logging();

  CLI::App app{"cone: supervised contrastive training lab"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));

  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  auto add_config = [&](CLI::App *sub) {
    sub->add_option("--config", config_path, "JSON config file");
    sub->add_option("--set", sets, "Override one config field, KEY=VALUE (repeatable)");
  };

  auto *train = app.add_subcommand("train", "Train a model and write a run directory");
  add_config(train);
  train->add_option("--seed", seed, "Root seed (overrides the config)");
  std::string train_out = "cone_run";
  train->add_option("--out", train_out, "Run directory")->capture_default_str();

  auto *gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every loss");
  add_config(gradcheck);
  gradcheck->add_option("--seed", seed, "Root seed (overrides the config)");
  double tolerance = 1e-4;
  bool inject_fault = false;
  gradcheck->add_option("--tolerance", tolerance, "Maximum relative error")
      ->capture_default_str();
  gradcheck->add_flag("--inject-fault", inject_fault)->group("");

  auto *analyze = app.add_subcommand("analyze", "Reports on a trained checkpoint and bank");
  analyze->require_subcommand(1);
  AnalyzeInputs ain;
  std::vector<std::size_t> sample_ids;
  auto add_inputs = [&](CLI::App *sub, bool with_bank) {
    sub->add_option("--run", ain.run_dir, "Run directory written by train");
    sub->add_option("--checkpoint", ain.checkpoint, "Checkpoint (default RUN/checkpoint.json)");
    if (with_bank) sub->add_option("--bank", ain.bank, "Bank dump (default RUN/bank.json)");
    sub->add_option("--data", ain.data, "Dataset CSV (default RUN/train.csv)");
    sub->add_option("--out", ain.out, "Output CSV");
    sub->add_option("--config", ain.config, "JSON config (default RUN/config.json)");
    sub->add_option("--set", ain.sets, "Override one config field, KEY=VALUE (repeatable)");
  };
  auto *coefficients = analyze->add_subcommand("coefficients", "Per-anchor gradient coefficients");
  add_inputs(coefficients, true);
  coefficients->add_option("--samples", sample_ids, "Dataset rows to report (default 0..7)")
      ->delimiter(',');
  auto *margins = analyze->add_subcommand("margins", "LogSumExp margins of the bank pools");
  add_inputs(margins, true);
  auto *exporter = analyze->add_subcommand("export", "Normalized embeddings as CSV");
  add_inputs(exporter, false);

  auto *gendata = app.add_subcommand("gendata", "Write a synthetic multi-mode dataset");
  add_config(gendata);
  gendata->add_option("--seed", seed, "Root seed (overrides the config)");
  std::string gen_out = "data.csv";
  gendata->add_option("--out", gen_out, "Output CSV")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    if (*train) return cmd_train(resolve_config(config_path, sets, seed), train_out);
    if (*gradcheck) {
      return cmd_gradcheck(resolve_config(config_path, sets, seed), tolerance, inject_fault);
    }
    if (*gendata) return cmd_gendata(resolve_config(config_path, sets, seed), gen_out);
    if (*coefficients) return cmd_coefficients(ain, sample_ids);
    if (*margins) return cmd_margins(ain);
    if (*exporter) return cmd_export(ain);
  } catch (const ConfigError &e) {
    spdlog::error("config error: {}", e.what());
    return kUsage;
  } catch (const UsageError &e) {
    spdlog::error("{}", e.what());
    return kUsage;
  } catch (const ParseError &e) {
    spdlog::error("{}", e.what());
    return kUsage;
  } catch (const std::exception &e) {
    spdlog::error("{}", e.what());
    return kAbort;
  }
  return kUsage;
}

}  // namespace cone
