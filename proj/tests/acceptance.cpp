// Acceptance runner: one PASS/FAIL line per criterion, non-zero exit if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "domainshift/cli.hpp"
#include "domainshift/corpus.hpp"
#include "domainshift/divergence.hpp"
#include "domainshift/gradcheck.hpp"
#include "domainshift/shift_metrics.hpp"
#include "domainshift/synthetic.hpp"
#include "domainshift/trainer.hpp"
#include "support.hpp"

using namespace domainshift;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// 1. Divergence axioms over random pairs.
Outcome axioms() {
  Outcome o;
  const auto t0 = Clock::now();
  CounterRng rng(derive_key(1, hash_name("axioms")));
  const std::size_t lengths[] = {2, 16, 768};
  std::size_t pairs = 0;
  double worst_asym = 0.0, worst_self = 0.0, min_kl = 0.0, lo = 1.0, hi = 0.0;
  for (int i = 0; i < 12000; ++i) {
    const std::size_t n = lengths[i % 3];
    const auto p = testsupport::random_distribution(rng, n);
    const auto q = testsupport::random_distribution(rng, n);
    const double pq = js_divergence(p, q).value, qp = js_divergence(q, p).value;
    worst_asym = std::max(worst_asym, std::abs(pq - qp));
    worst_self = std::max(worst_self, std::abs(js_divergence(p, p).value));
    lo = std::min(lo, pq);
    hi = std::max(hi, pq);
    const double kl = kl_divergence(p, q).value;
    if (!std::isinf(kl)) min_kl = std::min(min_kl, kl);
    min_kl = std::min(min_kl, kl_divergence(q, p).value);
    ++pairs;
  }
  const double t = seconds_since(t0);
  o.check(pairs >= 10000, "fewer than 1e4 pairs");
  o.check(worst_asym <= 1e-12, "asymmetry " + fmt("%.3g", worst_asym));
  o.check(lo >= 0.0 && hi <= 1.0, "JS outside [0,1]");
  o.check(worst_self == 0.0, "JS(P,P) " + fmt("%.3g", worst_self));
  o.check(min_kl >= 0.0, "negative KL " + fmt("%.3g", min_kl));
  o.check(t < 30.0, "runtime " + fmt("%.1fs", t));
  o.detail += (o.detail.empty() ? "" : "; ") + std::to_string(pairs) + " pairs, max asym " +
              fmt("%.2g", worst_asym) + ", " + fmt("%.2fs", t);
  return o;
}

// 2. Quarter-step length-3 grid against textbook natural-log evaluation.
Outcome oracle_grid() {
  Outcome o;
  std::vector<std::vector<double>> grid;
  for (int a = 0; a <= 4; ++a)
    for (int b = 0; a + b <= 4; ++b) grid.push_back({a / 4.0, b / 4.0, (4 - a - b) / 4.0});
  auto textbook_kl = [](const std::vector<double>& p, const std::vector<double>& q) {
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (p[i] == 0.0) continue;
      if (q[i] == 0.0) return std::numeric_limits<double>::infinity();
      s += p[i] * std::log(p[i] / q[i]);
    }
    return s / std::log(2.0);
  };
  double worst = 0.0;
  std::size_t cases = 0;
  for (const auto& p : grid) {
    for (const auto& q : grid) {
      std::vector<double> m(3);
      for (int i = 0; i < 3; ++i) m[i] = 0.5 * (p[i] + q[i]);
      const double js_ref = 0.5 * textbook_kl(p, m) + 0.5 * textbook_kl(q, m);
      worst = std::max(worst, std::abs(js_divergence(p, q).value - js_ref));
      const double kl_ref = textbook_kl(p, q), kl = kl_divergence(p, q).value;
      if (std::isinf(kl_ref) || std::isinf(kl)) {
        o.check(std::isinf(kl_ref) && std::isinf(kl), "KL support mismatch");
      } else {
        worst = std::max(worst, std::abs(kl - kl_ref));
      }
      ++cases;
    }
  }
  o.check(worst <= 1e-12, "max error " + fmt("%.3g", worst));
  o.detail += (o.detail.empty() ? "" : "; ") + std::to_string(cases) + " pairs, max error " + fmt("%.2g", worst);
  return o;
}

// 3. Analytic anchors.
Outcome anchors() {
  Outcome o;
  const double js = js_divergence(std::vector<double>{1.0, 0.0}, std::vector<double>{0.0, 1.0}).value;
  o.check(js == 1.0, "JS((1,0),(0,1)) = " + fmt("%.17g", js));
  const double kl = kl_divergence(std::vector<double>{0.5, 0.5}, std::vector<double>{0.25, 0.75}).value;
  o.check(std::abs(kl - 0.20752) <= 1e-5, "KL = " + fmt("%.8f", kl));

  MemoryCountSource source;
  DomainSpec red{"red", {}}, blue{"blue", {}};
  for (int k = 0; k < 4; ++k) {
    const std::string id = std::to_string(k);
    source.add("red/" + id, PixelGrid(4, 4, Rgb{255, 0, 0}));
    source.add("blue/" + id, PixelGrid(4, 4, Rgb{0, 0, 255}));
    red.classes["c"].push_back("red/" + id);
    blue.classes["c"].push_back("blue/" + id);
  }
  const double idd = inter_domain_dissimilarity(red, blue, source);
  o.check(std::abs(idd - 2.0 / 3.0) <= 1e-9, "IDD = " + fmt("%.17g", idd));
  o.detail += (o.detail.empty() ? "" : "; ") + std::string("JS ") + fmt("%.17g", js) + ", KL " +
              fmt("%.6f", kl) + ", IDD " + fmt("%.12f", idd);
  return o;
}

// 4. ICV degenerate cases, determinism and throughput on a 1k-image corpus.
Outcome icv_cases() {
  Outcome o;
  MemoryCountSource mem;
  CounterRng rng(4);
  const auto noise = testsupport::random_grid(rng, 8, 8);
  DomainSpec dup{"dup", {}}, bw{"bw", {}};
  for (const char* cls : {"x", "y"})
    for (int k = 0; k < 6; ++k) {
      const std::string p = std::string("dup/") + cls + "/" + std::to_string(k);
      mem.add(p, noise);
      dup.classes[cls].push_back(p);
    }
  mem.add("bw/black", PixelGrid(4, 4, Rgb{0, 0, 0}));
  mem.add("bw/white", PixelGrid(4, 4, Rgb{255, 255, 255}));
  bw.classes["pair"] = {"bw/black", "bw/white"};
  IcvOptions opts;
  opts.seed = 7;
  const double icv_dup = intra_class_variation(dup, mem, opts).icv;
  const double icv_bw = intra_class_variation(bw, mem, opts).icv;
  o.check(std::abs(icv_dup) <= 1e-9, "duplicate ICV " + fmt("%.3g", icv_dup));
  o.check(std::abs(icv_bw - 1.0) <= 1e-9, "black/white ICV " + fmt("%.17g", icv_bw));

  testsupport::ScratchDir dir("acceptance-icv");
  std::size_t written = 0;
  DomainSpec corpus_domain{"synthetic", {}};
  for (int c = 0; c < 10; ++c) {
    const std::string cls = "class" + std::to_string(c);
    const Rgb base{static_cast<std::uint8_t>(25 * c), 128, static_cast<std::uint8_t>(250 - 25 * c)};
    for (int k = 0; k < 100; ++k) {
      const std::string rel = cls + "/" + std::to_string(k) + ".png";
      testsupport::write_png(dir.path(), rel, synthetic::tinted(16, 16, base, 10 + 3 * c, derive_key(9, c, k)));
      corpus_domain.classes[cls].push_back((dir.path() / rel).string());
      ++written;
    }
  }
  const auto t0 = Clock::now();
  FileCountSource files;
  files.warm(corpus_domain.all_paths());
  const auto a = intra_class_variation(corpus_domain, files, opts);
  const double t = seconds_since(t0);
  FileCountSource fresh;
  const auto b = intra_class_variation(corpus_domain, fresh, opts);
  o.check(a.trials == 3, "expected 3 trials");
  o.check(a.per_trial == b.per_trial && a.icv == b.icv && a.trial_keys == b.trial_keys, "rerun differs");
  opts.seed = 8;
  o.check(intra_class_variation(corpus_domain, files, opts).trial_keys != a.trial_keys, "seed ignored");
  o.check(t < 60.0, "runtime " + fmt("%.1fs", t));
  o.detail += (o.detail.empty() ? "" : "; ") + std::to_string(written) + " images in " + fmt("%.2fs", t) +
              ", ICV " + fmt("%.4f", a.icv);
  return o;
}

// 5. Finite differences through random networks for the four losses.
Outcome gradients() {
  Outcome o;
  const auto t0 = Clock::now();
  CounterRng rng(derive_key(5, hash_name("acceptance-grad")));
  GradCheckOptions opts;  // h = 1e-5, tolerance 1e-4
  double worst = 0.0;
  std::size_t nets = 0, coords = 0;
  auto normal_vector = [&](std::size_t n) {
    Vector v(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = rng.normal();
    return v;
  };
  for (int trial = 0; trial < 8; ++trial) {
    // 1-3 layers including the head, widths up to 64; the first net is the largest allowed.
    std::vector<std::size_t> dims{8, 64, 64};
    std::size_t classes = 5;
    if (trial > 0) {
      const std::size_t layers = 1 + rng.below(3);
      dims = {2 + rng.below(8)};
      for (std::size_t l = 1; l < layers; ++l) dims.push_back(2 + rng.below(63));
      if (dims.size() == 1) dims.push_back(dims[0]);
      classes = 2 + rng.below(4);
    }
    TrainConfig c;
    c.seed = rng();
    const Model pre = init_model(dims, classes, c);
    c.seed = rng();
    const Model model = init_model(dims, classes, c);
    LabeledSet batch;
    for (int i = 0; i < 2; ++i) batch.push_back({normal_vector(dims[0]), rng.below(classes)});
    c.lambda = 0.1;
    c.lambda_kl = 0.1;
    c.normalization = trial % 2 ? FeatureNormalization::AnchoredSoftmax : FeatureNormalization::Softmax;

    const std::size_t nf = model.featurizer.parameter_count(), ng = model.head.parameter_count();
    std::vector<double> params(model.featurizer.params().begin(), model.featurizer.params().end());
    params.insert(params.end(), model.head.params().begin(), model.head.params().end());
    Model probe = model;
    auto load = [&](std::span<const double> p) {
      std::copy(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(nf), probe.featurizer.params().begin());
      std::copy(p.begin() + static_cast<std::ptrdiff_t>(nf), p.end(), probe.head.params().begin());
    };

    // Per-sample loss on (features, logits) with its output gradients.
    struct Term {
      const char* name;
      std::function<double(const Vector&, const Vector&, const Sample&)> value;
      std::function<std::pair<Vector, Vector>(const Vector&, const Vector&, const Sample&)> grad;
    };
    const double T = c.temperature;
    const auto norm = c.normalization;
    const std::vector<Term> terms{
        {"cross_entropy", [](const Vector&, const Vector& z, const Sample& s) { return cross_entropy(z, s.label); },
         [](const Vector& f, const Vector& z, const Sample& s) {
           return std::pair{Vector(Vector::Zero(f.size())), cross_entropy_grad(z, s.label).grad};
         }},
        {"grounding_js",
         [&](const Vector& f, const Vector&, const Sample& s) {
           return grounding_js(pre.featurizer.forward(s.x), f, T, norm);
         },
         [&](const Vector& f, const Vector& z, const Sample& s) {
           return std::pair{grounding_js_grad(pre.featurizer.forward(s.x), f, T, norm).grad,
                            Vector(Vector::Zero(z.size()))};
         }},
        {"kl_head_regularizer",
         [&](const Vector&, const Vector& z, const Sample& s) { return kl_head_regularizer(pre.logits(s.x), z); },
         [&](const Vector& f, const Vector& z, const Sample& s) {
           return std::pair{Vector(Vector::Zero(f.size())), kl_head_regularizer_grad(pre.logits(s.x), z).grad};
         }},
    };
    for (const auto& term : terms) {
      auto grad = ModelGrad::zeros_like(model);
      for (const auto& s : batch) {
        ForwardCache fc, gc;
        const Vector f = model.featurizer.forward(s.x, &fc);
        const Vector z = model.head.forward(f, &gc);
        auto [df, dz] = term.grad(f, z, s);
        df += model.head.backward(gc, dz, grad.head);
        model.featurizer.backward(fc, df, grad.featurizer);
      }
      std::vector<double> analytic = grad.featurizer;
      analytic.insert(analytic.end(), grad.head.begin(), grad.head.end());
      const auto r = finite_diff_check(
          [&](std::span<const double> p) {
            load(p);
            double total = 0.0;
            for (const auto& s : batch) {
              const Vector f = probe.featurizer.forward(s.x);
              total += term.value(f, probe.head.forward(f), s);
            }
            return total;
          },
          params, analytic, {{"f", 0, nf}, {"g", nf, ng}}, opts);
      worst = std::max(worst, r.max_rel_error);
      o.check(r.passed(), std::string(term.name) + " rel error " + fmt("%.3g", r.max_rel_error));
      coords += nf + ng;
    }
    {
      auto grad = ModelGrad::zeros_like(model);
      smos_total_loss(batch, {}, pre, model, c, &grad);
      std::vector<double> analytic = grad.featurizer;
      analytic.insert(analytic.end(), grad.head.begin(), grad.head.end());
      const auto r = finite_diff_check(
          [&](std::span<const double> p) {
            load(p);
            return smos_total_loss(batch, {}, pre, probe, c).total;
          },
          params, analytic, {{"f", 0, nf}, {"g", nf, ng}}, opts);
      worst = std::max(worst, r.max_rel_error);
      o.check(r.passed(), "smos_total_loss rel error " + fmt("%.3g", r.max_rel_error));
      coords += nf + ng;
    }
    ++nets;
  }
  const double t = seconds_since(t0);
  o.check(t < 120.0, "runtime " + fmt("%.1fs", t));
  o.detail += (o.detail.empty() ? "" : "; ") + std::to_string(nets) + " nets, " + std::to_string(coords) +
              " coords, max rel error " + fmt("%.2g", worst) + ", " + fmt("%.2fs", t);
  return o;
}

// 6. lambda = lambda_kl = 0 reproduces ERM.
Outcome lambda_zero() {
  Outcome o;
  const auto task = synthetic::color_shift_task(6, 32);
  TrainConfig pc;
  pc.seed = 6;
  pc.steps = 200;
  const std::vector<std::size_t> dims{5, 16, 3};
  const auto pre = train_precursor(pool_domains(task.precursor), dims, 4, pc).model;
  const std::vector<DomainSamples> train(task.dg.begin(), task.dg.end() - 1);
  TrainConfig c;
  c.seed = 6;
  c.steps = 500;
  c.lambda = 0.0;
  c.lambda_kl = 0.0;
  const auto g = train_grounded(train, pre, dims, 2, c);
  const auto e = train_erm(train, dims, 2, c);
  double worst = 0.0;
  o.check(g.history.size() == e.history.size(), "history lengths differ");
  for (std::size_t i = 0; i < std::min(g.history.size(), e.history.size()); ++i) {
    worst = std::max(worst, std::abs(g.history[i].total - e.history[i].total));
    worst = std::max(worst, std::abs(g.history[i].l_erm - e.history[i].l_erm));
  }
  o.check(worst <= 1e-12, "max step difference " + fmt("%.3g", worst));
  o.detail += (o.detail.empty() ? "" : "; ") + std::to_string(g.history.size()) + " steps, max difference " +
              fmt("%.2g", worst);
  return o;
}

// 7. Grounding lowers held-out representation IDD (seed-averaged).
Outcome directionality() {
  Outcome o;
  const auto t0 = Clock::now();
  const std::vector<std::size_t> dims{5, 16, 3};
  double erm_sum = 0.0, smos_sum = 0.0;
  std::string per_seed;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto task = synthetic::color_shift_task(seed);
    TrainConfig pc;
    pc.seed = seed;
    pc.steps = 1000;
    const auto pre = train_precursor(pool_domains(task.precursor), dims, task.precursor_classes, pc).model;
    const std::vector<DomainSamples> train(task.dg.begin(), task.dg.end() - 1);
    std::vector<FeatureDomain> features;
    for (const auto& d : task.dg) {
      FeatureDomain f{d.name, {}};
      for (const auto& s : d.samples) f.inputs.push_back(s.x);
      features.push_back(std::move(f));
    }
    const std::size_t held_out = task.dg.size() - 1;
    double idd[2];
    for (int k = 0; k < 2; ++k) {
      TrainConfig c;
      c.seed = seed;
      c.steps = 2000;
      c.lambda = k == 0 ? 0.0 : 0.1;
      const auto r = train_grounded(train, pre, dims, task.dg_classes, c);
      idd[k] = mean_idd_to(representation_idd(r.model.featurizer, features), held_out);
    }
    erm_sum += idd[0];
    smos_sum += idd[1];
    per_seed += fmt(" %.4f", idd[0]) + "/" + fmt("%.4f", idd[1]);
  }
  const double t = seconds_since(t0);
  o.check(smos_sum / 3.0 < erm_sum / 3.0, "lambda=0.1 not lower");
  o.check(t < 300.0, "runtime " + fmt("%.1fs", t));
  o.detail += (o.detail.empty() ? "" : "; ") + std::string("held-out IDD lambda=0 ") + fmt("%.4f", erm_sum / 3.0) +
              " vs lambda=0.1 " + fmt("%.4f", smos_sum / 3.0) + " (per seed" + per_seed + "), " +
              fmt("%.2fs", t);
  return o;
}

// 8. Precursor reaches 0.99 on separable blobs.
Outcome trainability() {
  Outcome o;
  const auto data = synthetic::blobs(100, 0.5, 8);
  TrainConfig c;
  c.seed = 8;
  c.steps = 500;
  c.batch_size = 16;
  const auto r = train_precursor(data, {2, 16, 8}, 2, c);
  const double acc = accuracy(r.model, data);
  o.check(acc >= 0.99, "accuracy " + fmt("%.4f", acc));
  o.detail += (o.detail.empty() ? "" : "; ") + std::string("train accuracy ") + fmt("%.4f", acc);
  return o;
}

// 9. Replaying a report's config_echo yields identical bytes.
Outcome reproducibility() {
  Outcome o;
  testsupport::ScratchDir dir("acceptance-replay");
  auto run = [](const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = cli::run_command(args, out, err);
    return std::pair{code, out.str()};
  };
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  };
  const auto d = dir.path();
  const std::string corpus = (d / "corpus").string(), vectors = (d / "vectors").string();
  o.check(run({"synth", "--kind", "corpus", "--out-dir", corpus, "--per-class", "6"}).first == 0, "synth corpus");
  o.check(run({"synth", "--kind", "vectors", "--out-dir", vectors, "--per-class", "16"}).first == 0,
          "synth vectors");
  const std::string manifest = (d / "m.json").string(), pre_ckpt = (d / "pre.json").string();
  const std::vector<std::vector<std::string>> runs{
      {"scan", "--root", corpus, "--manifest-out", manifest},
      {"icv", "--manifest", manifest, "--seed", "3"},
      {"icv", "--manifest", manifest, "--sample-cap", "4", "--pool", "image"},
      {"idd", "--manifest", manifest, "--reference", manifest, "--reference-domain", "green"},
      {"train-precursor", "--data", vectors + "/precursor.json", "--dims", "5,16,3", "--steps", "100",
       "--checkpoint-out", pre_ckpt},
      {"train-smos", "--data", vectors + "/dg.json", "--precursor", pre_ckpt, "--precursor-data",
       vectors + "/precursor.json", "--held-out", "blue", "--dims", "5,16,3", "--steps", "100"},
      {"rep-idd", "--checkpoint", pre_ckpt, "--data", vectors + "/dg.json", "--held-out", "blue"},
      {"grad-check", "--seed", "4"},
  };
  std::size_t n = 0;
  for (const auto& args : runs) {
    const auto first = (d / ("first" + std::to_string(n) + ".json")).string();
    const auto second = (d / ("second" + std::to_string(n) + ".json")).string();
    auto with_out = args;
    with_out.insert(with_out.end(), {"--out", first});
    const int c1 = run(with_out).first;
    const int c2 = run({args.front(), "--config", first, "--out", second}).first;
    o.check(c1 == 0, args.front() + " first run exit " + std::to_string(c1));
    o.check(c2 == 0, args.front() + " replay exit " + std::to_string(c2));
    if (c1 == 0 && c2 == 0) o.check(slurp(first) == slurp(second), args.front() + " replay differs");
    ++n;
  }
  o.detail += (o.detail.empty() ? "" : "; ") + std::to_string(n) + " subcommand runs replayed";
  return o;
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"divergence axioms", axioms},
      {"oracle equivalence", oracle_grid},
      {"analytic anchors", anchors},
      {"ICV degenerate cases", icv_cases},
      {"gradient verification", gradients},
      {"lambda=0 reduction", lambda_zero},
      {"grounding directionality", directionality},
      {"precursor trainability", trainability},
      {"reproducibility", reproducibility},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    failures += o.pass ? 0 : 1;
    std::printf("%s %zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
