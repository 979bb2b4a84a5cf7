// Acceptance suite: one PASS/FAIL line per criterion.
// Usage: cone_acceptance PATH_TO_CONE_EXECUTABLE

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>
#include <string>
#include <vector>

#include "cone/cli.hpp"
#include "cone/ema.hpp"
#include "cone/losses.hpp"
#include "cone/memory_bank.hpp"
#include "cone/trainer.hpp"
#include "cone/verify.hpp"

using namespace cone;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int id, bool ok, const std::string &what, const std::string &measured) {
  std::printf("%s [%2d] %s | %s\n", ok ? "PASS" : "FAIL", id, what.c_str(), measured.c_str());
  std::fflush(stdout);
  if (!ok) ++g_failures;
}

std::string fmt(const char *f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Vector random_unit(std::size_t d, SeededRng &rng) {
  Vector v(d);
  for (auto &x : v) x = rng.normal();
  const double n = l2_norm(v);
  for (auto &x : v) x /= n;
  return v;
}

Matrix random_units(std::size_t rows, std::size_t d, SeededRng &rng) {
  Matrix m(rows, d);
  for (std::size_t r = 0; r < rows; ++r) m.set_row(r, random_unit(d, rng));
  return m;
}

struct Instance {
  Vector z;
  NeighborSet nbrs;
  double tau;
};

Instance random_instance(SeededRng &rng, std::size_t min_neg) {
  const double taus[] = {0.05, 0.1, 0.2};
  const std::size_t d = 2 + rng.below(15);
  const std::size_t np = 1 + rng.below(8);
  const std::size_t nn = min_neg + rng.below(9 - min_neg);
  Instance in{random_unit(d, rng), {}, taus[rng.below(3)]};
  in.nbrs.positives = random_units(np, d, rng);
  in.nbrs.negatives = random_units(nn, d, rng);
  return in;
}

Vector central_difference(const std::function<double(const Vector &)> &f, Vector x,
                          double h) {
  Vector g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

std::vector<double> sims(const Vector &z, const Matrix &pool) {
  std::vector<double> s;
  for (std::size_t r = 0; r < pool.rows(); ++r) s.push_back(dot(z, pool.row(r)));
  return s;
}

long double lse_ld(const std::vector<double> &s, double tau) {
  long double mx = -INFINITY;
  for (double v : s) mx = std::max<long double>(mx, v / tau);
  long double acc = 0.0L;
  for (double v : s) acc += std::exp(static_cast<long double>(v) / tau - mx);
  return mx + std::log(acc);
}

void criterion_1() {
  SeededRng rng(101);
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  for (int k = 0; k < 100; ++k) {
    const Instance in = random_instance(rng, 0);
    const Vector analytic = supcon_in_grad(in.z, in.nbrs, in.tau)->grad_z;
    const Vector numeric = central_difference(
        [&](const Vector &z) { return *supcon_in(z, in.nbrs, in.tau); }, in.z, 1e-6);
    worst = std::max(worst, block_relative_error(analytic, numeric));
  }
  const double secs = seconds_since(t0);
  report(1, worst <= 1e-6 && secs < 5.0,
         "supcon_in gradient vs central differences, 100 instances, rel err <= 1e-6, < 5 s",
         "max rel err " + fmt("%.3e", worst) + ", " + fmt("%.3f", secs) + " s");
}

void criterion_2() {
  SeededRng rng(202);
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  for (int k = 0; k < 1000; ++k) {
    const Instance in = random_instance(rng, 1);
    const long double gap = lse_ld(sims(in.z, in.nbrs.negatives), in.tau) -
                            lse_ld(sims(in.z, in.nbrs.positives), in.tau);
    const auto expected = static_cast<double>(std::log1p(std::exp(gap)));
    const double direct = *supcon_in(in.z, in.nbrs, in.tau);
    const double reform = *supcon_in_reformulated(in.z, in.nbrs, in.tau);
    worst = std::max({worst, std::abs(direct - expected), std::abs(direct - reform)});
  }
  const double secs = seconds_since(t0);
  report(2, worst <= 1e-9 && secs < 5.0,
         "supcon_in == log(1 + exp(lse_neg - lse_pos)), 1000 instances, 1e-9, < 5 s",
         "max abs diff " + fmt("%.3e", worst) + ", " + fmt("%.3f", secs) + " s");
}

void criterion_3() {
  SeededRng rng(303);
  std::size_t violations = 0, pairs = 0;
  double worst_sum = 0.0;
  for (int k = 0; k < 1000; ++k) {
    const Instance in = random_instance(rng, 1);
    const CoefficientReport r = supcon_in_grad(in.z, in.nbrs, in.tau)->report;
    for (std::size_t i = 0; i < r.alpha_pos.size(); ++i)
      for (std::size_t j = 0; j < r.alpha_pos.size(); ++j)
        if (r.pos_similarity[i] > r.pos_similarity[j]) {
          ++pairs;
          if (!(r.alpha_pos[i] > r.alpha_pos[j])) ++violations;
        }
    double sum = 0.0;
    for (double a : r.alpha_pos) sum += a;
    for (double a : r.alpha_neg) sum += a;
    worst_sum = std::max(worst_sum, std::abs(sum));
  }
  report(3, violations == 0 && worst_sum <= 1e-12,
         "alpha order follows similarity order; sum of alpha == 0 +- 1e-12, 1000 instances",
         std::to_string(violations) + " violations in " + std::to_string(pairs) +
             " ordered pairs, max |sum alpha| " + fmt("%.3e", worst_sum));
}

void criterion_4() {
  SeededRng rng(404);
  bool ok = true;
  for (int k = 0; k < 200; ++k) {
    Instance in = random_instance(rng, 0);
    in.nbrs.negatives = Matrix(0, in.z.size());
    const double loss = *supcon_in(in.z, in.nbrs, in.tau);
    const auto g = supcon_in_grad(in.z, in.nbrs, in.tau);
    ok = ok && loss == 0.0 && g.has_value();
    for (double v : g->grad_z) ok = ok && v == 0.0;
  }
  report(4, ok, "empty negative set gives loss exactly 0 and gradient exactly 0",
         ok ? "200 instances exact" : "non-zero value observed");
}

void criterion_5() {
  SeededRng rng(505);
  bool bounds = true;
  double worst_excess = 0.0;
  for (int k = 0; k < 1000; ++k) {
    const Instance in = random_instance(rng, 1);
    const MarginReport m = margin_analysis(in.z, in.nbrs, in.tau);
    const double cap_p = std::log(static_cast<double>(in.nbrs.positives.rows()));
    const double cap_n = std::log(static_cast<double>(in.nbrs.negatives.rows()));
    bounds = bounds && m.m_pos >= 0.0 && m.m_neg >= 0.0 && m.m_pos <= cap_p &&
             m.m_neg <= cap_n;
    worst_excess = std::max({worst_excess, m.m_pos - cap_p, m.m_neg - cap_n});
  }

  // Fixed pools in the plane with unique maxima.
  auto at_cos = [](double c) { return std::vector<double>{c, std::sqrt(1.0 - c * c)}; };
  NeighborSet fixed;
  fixed.positives = Matrix::from_rows({at_cos(0.9), at_cos(0.7), at_cos(0.5)});
  fixed.negatives = Matrix::from_rows({at_cos(0.6), at_cos(0.4), at_cos(0.3), at_cos(-0.2)});
  const Vector z{1.0, 0.0};
  bool monotone = true;
  std::string trace;
  double prev_p = INFINITY, prev_n = INFINITY;
  for (double tau : {0.2, 0.1, 0.05}) {
    const MarginReport m = margin_analysis(z, fixed, tau);
    monotone = monotone && m.m_pos <= prev_p && m.m_neg <= prev_n;
    prev_p = m.m_pos;
    prev_n = m.m_neg;
    trace += fmt(" tau %.2f:", tau) + fmt(" m_pos %.4f", m.m_pos) + fmt(" m_neg %.4f", m.m_neg);
  }
  report(5, bounds && monotone,
         "0 <= m <= ln(pool) on 1000 instances; m non-increasing as tau 0.2 -> 0.1 -> 0.05",
         std::string(bounds ? "bounds hold" : "bound violated") +
             fmt(" (max excess %.2e);", worst_excess) + trace);
}

void criterion_6() {
  SeededRng rng(606);
  double simplex_err = 0.0;
  bool kl_ok = true;
  for (int k = 0; k < 1000; ++k) {
    const std::size_t bank = 1 + rng.below(64);
    const std::size_t classes = 2 + rng.below(9);
    const std::size_t d = 2 + rng.below(15);
    const Matrix features = random_units(bank, d, rng);
    Matrix dists(bank, classes);
    for (std::size_t r = 0; r < bank; ++r) {
      Vector logits(classes);
      for (auto &x : logits) x = 3.0 * rng.normal();
      dists.set_row(r, stable_softmax(logits));
    }
    const FeatureVec z = l2_normalize(random_unit(d, rng));
    const Vector p_dc = dc_target(dc_instance_dist(z, features, 0.07), dists);
    double sum = 0.0;
    for (double p : p_dc) {
      sum += p;
      simplex_err = std::max(simplex_err, -p);
    }
    simplex_err = std::max(simplex_err, std::abs(sum - 1.0));

    Vector logits(classes);
    for (auto &x : logits) x = 2.0 * rng.normal();
    const Vector p_class = stable_softmax(logits);
    kl_ok = kl_ok && dc_kl(p_dc, p_class).loss >= 0.0 && dc_kl(p_dc, p_dc).loss == 0.0;
  }

  double worst_grad = 0.0;
  for (int k = 0; k < 100; ++k) {
    const std::size_t classes = 2 + rng.below(9);
    Vector t(classes), logits(classes);
    for (auto &x : t) x = rng.normal();
    for (auto &x : logits) x = 2.0 * rng.normal();
    const Vector target = stable_softmax(t);
    const Vector analytic = dc_kl(target, stable_softmax(logits)).grad_logits;
    const Vector numeric = central_difference(
        [&](const Vector &l) { return dc_kl(target, stable_softmax(l)).loss; }, logits, 1e-6);
    worst_grad = std::max(worst_grad, block_relative_error(analytic, numeric));
  }
  report(6, simplex_err <= 1e-12 && kl_ok && worst_grad <= 1e-6,
         "p_dc on the simplex +- 1e-12 (1000 banks); KL >= 0, KL(p,p) == 0; KL grad rel err <= 1e-6",
         fmt("simplex err %.3e", simplex_err) + (kl_ok ? ", KL checks hold" : ", KL check failed") +
             fmt(", grad rel err %.3e", worst_grad));
}

void criterion_7() {
  SeededRng rng(707);
  ModelShape shape;
  const ModelParams source = init_params(shape, rng);
  const ModelParams original = init_params(shape, rng);

  ModelParams target = original;
  ema_update(target, source, 1.0);
  const bool noop = target == original;
  ema_update(target, source, 0.0);
  const bool copy = target == source;

  bool endpoints = true, monotone = true;
  for (std::size_t total : {1u, 7u, 100u, 12345u}) {
    const EmaState st(0.996, total);
    endpoints = endpoints && momentum_at(st, 0) == 0.996 && momentum_at(st, total) == 1.0;
    for (std::size_t s = 1; s <= total; ++s)
      monotone = monotone && momentum_at(st, s) >= momentum_at(st, s - 1);
  }
  report(7, noop && copy && endpoints && monotone,
         "EMA m=1 bitwise no-op, m=0 bitwise copy, schedule 0.996 -> 1.0 exact and monotone",
         std::string(noop ? "no-op" : "NO-OP BROKEN") + ", " + (copy ? "copy" : "COPY BROKEN") +
             ", " + (endpoints ? "endpoints exact" : "ENDPOINTS OFF") + ", " +
             (monotone ? "monotone" : "NOT MONOTONE"));
}

void criterion_8() {
  const auto t0 = std::chrono::steady_clock::now();
  TrainConfig config;
  config.seed = 8;
  SeededRng rng(derive_seed(config.seed, "data"));
  const Dataset pool = gen_multimode(MultimodeParams{4, 2, 2, 20, 10.0, 1.0}, rng);
  const GradCheckFixture fixture = make_gradcheck_fixture(config, pool, 8, 64);
  const GradCheckReport r = grad_check(fixture.params, fixture.batch,
                                       objective_loss(config, fixture), {1e-6, 1e-4, {}});
  const double secs = seconds_since(t0);
  report(8, r.passed && r.max_relative_error <= 1e-4 && secs < 30.0,
         "full objective through the model vs finite differences, 8-sample batch, <= 1e-4, < 30 s",
         "max rel err " + fmt("%.3e", r.max_relative_error) + " over " +
             std::to_string(r.tensors.size()) + " tensors, " + fmt("%.3f", secs) + " s");
}

void criterion_9() {
  struct Entry {
    Vector feature;
    std::size_t label;
  };
  SeededRng rng(909);
  const std::size_t capacity = 37, dim = 4, classes = 3;
  MemoryBank bank(capacity, dim, classes);
  std::deque<Entry> oracle;
  std::vector<Vector> recent;
  std::size_t mismatches = 0, queries = 0;

  for (int op = 0; op < 10000; ++op) {
    if (rng.uniform() < 0.6) {
      Vector f = (!recent.empty() && rng.uniform() < 0.2) ? recent[rng.below(recent.size())]
                                                          : random_unit(dim, rng);
      recent.push_back(f);
      const std::size_t label = rng.below(classes);
      Vector dist(classes, 1.0 / static_cast<double>(classes));
      bank.push({FeatureVec::from_unit(f), dist, label});
      oracle.push_back({f, label});
      if (oracle.size() > capacity) oracle.pop_front();
    } else {
      ++queries;
      const Vector z = random_unit(dim, rng);
      const std::size_t label = rng.below(classes);
      const std::size_t top_n = 1 + rng.below(12);
      const NeighborSet got = bank.query_neighbors(z, label, top_n);

      std::vector<std::pair<double, std::size_t>> pos;
      std::vector<std::size_t> neg;
      for (std::size_t i = 0; i < oracle.size(); ++i) {
        if (oracle[i].label == label) {
          pos.emplace_back(cosine_similarity(z, oracle[i].feature), i);
        } else {
          neg.push_back(i);
        }
      }
      std::sort(pos.begin(), pos.end(), [](auto &a, auto &b) {
        return a.first != b.first ? a.first > b.first : a.second > b.second;
      });
      if (pos.size() > top_n) pos.resize(top_n);
      std::vector<std::size_t> want_pos;
      for (auto &p : pos) want_pos.push_back(p.second);

      bool same = got.positive_ids == want_pos && got.negative_ids == neg &&
                  got.positives.rows() == want_pos.size() &&
                  got.negatives.rows() == neg.size();
      for (std::size_t i = 0; same && i < want_pos.size(); ++i)
        same = std::equal(got.positives.row(i).begin(), got.positives.row(i).end(),
                          oracle[want_pos[i]].feature.begin());
      for (std::size_t i = 0; same && i < neg.size(); ++i)
        same = std::equal(got.negatives.row(i).begin(), got.negatives.row(i).end(),
                          oracle[neg[i]].feature.begin());
      if (!same) ++mismatches;
    }
    bool contents = bank.size() == oracle.size();
    for (std::size_t i = 0; contents && i < oracle.size(); ++i) {
      const BankEntry &e = bank.at(i);
      contents = e.label == oracle[i].label &&
                 std::equal(e.feature.values().begin(), e.feature.values().end(),
                            oracle[i].feature.begin());
    }
    if (!contents) ++mismatches;
  }
  report(9, mismatches == 0,
         "memory bank vs naive bounded list, 10000 random push/query operations, exact",
         std::to_string(mismatches) + " mismatches, " + std::to_string(queries) + " queries");
}

RunConfig desk_config(std::uint64_t seed) {
  RunConfig c;
  c.train.seed = seed;
  c.data.data_n_per_mode = 313;
  c.data.data_max_samples = 2500;
  c.data.test_fraction = 0.2;
  return c;
}

struct DeskRun {
  double test_acc;
  double probe;
  double seconds;
};

DeskRun desk_run(const RunConfig &c) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto [train, test] = load_run_data(c);
  if (train.size() != 2000 || test.size() != 500) throw std::logic_error("desk split size");
  const FitResult r = fit(c.train, train, test);
  return {r.metrics.back().test_acc, centroid_probe(r.state.query, train, test),
          seconds_since(t0)};
}

void criteria_10_11() {
  const int seeds = 5;
  double full_acc = 0.0, ce_acc = 0.0, full_probe = 0.0, sup_probe = 0.0, worst_secs = 0.0;
  std::string per_seed;
  for (int s = 0; s < seeds; ++s) {
    RunConfig full = desk_config(static_cast<std::uint64_t>(s));
    RunConfig ce = full;
    ce.train.use_sup_in = false;
    ce.train.use_dc = false;
    RunConfig sup = full;
    sup.train.use_ce = false;
    sup.train.use_dc = false;
    sup.train.lambda_sup = 1.0;

    const DeskRun f = desk_run(full);
    const DeskRun c = desk_run(ce);
    const DeskRun p = desk_run(sup);
    full_acc += f.test_acc / seeds;
    ce_acc += c.test_acc / seeds;
    full_probe += f.probe / seeds;
    sup_probe += p.probe / seeds;
    worst_secs = std::max(worst_secs, f.seconds);
    per_seed += fmt(" s%.0f:", s) + fmt(" %.3f", f.test_acc) + fmt("/%.3f", c.test_acc) +
                fmt(" probe %.3f", f.probe) + fmt("/%.3f", p.probe);
  }
  report(10, full_acc >= ce_acc - 0.005 && worst_secs < 120.0,
         "desk-scale: mean test acc of CE + sup_in + dc >= CE-only - 0.5 pt over 5 seeds, < 2 min/seed",
         fmt("full %.4f", full_acc) + fmt(" vs CE-only %.4f", ce_acc) +
             fmt(", slowest seed %.1f s", worst_secs));
  report(11, sup_probe < full_probe,
         "desk-scale: centroid probe of sup_in-only encoder strictly below joint encoder, 5-seed mean",
         fmt("sup_in only %.4f", sup_probe) + fmt(" vs joint %.4f", full_probe) + ";" + per_seed);
}

std::string slurp(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void criterion_12(const std::string &cli) {
  const fs::path root = fs::temp_directory_path() / "cone_acceptance_determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  int rc = 0;
  for (const char *name : {"a", "b"}) {
    const std::string cmd = "CONE_LOG=warn \"" + cli + "\" train --seed 12 --set epochs=3 --out \"" +
                            (root / name).string() + "\"";
    rc |= std::system(cmd.c_str());
  }
  std::size_t identical = 0, compared = 0;
  for (const char *f : {"metrics.csv", "metrics.jsonl", "checkpoint.json", "ema_checkpoint.json",
                        "bank.json"}) {
    ++compared;
    const std::string a = slurp(root / "a" / f);
    if (!a.empty() && a == slurp(root / "b" / f)) ++identical;
  }
  fs::remove_all(root);
  report(12, rc == 0 && identical == compared,
         "two train invocations with the same config and seed give bitwise-identical outputs",
         std::to_string(identical) + "/" + std::to_string(compared) + " files identical, exit " +
             std::to_string(rc));
}

}  // namespace

int main(int argc, char **argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: %s PATH_TO_CONE\n", argv[0]);
    return 2;
  }
  const std::vector<std::function<void()>> checks{
      criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6,
      criterion_7, criterion_8, criterion_9, criteria_10_11,
      [&] { criterion_12(argv[1]); }};
  for (const auto &check : checks) {
    try {
      check();
    } catch (const std::exception &e) {
      std::printf("FAIL error: %s\n", e.what());
      ++g_failures;
    }
  }
  std::printf("%d failing\n", g_failures);
  return g_failures == 0 ? 0 : 1;
}
