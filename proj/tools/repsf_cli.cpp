// Copyright 2026 The RepSF Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


// repsf: command-line front end.
//
// Exit codes: 0 success, 1 validation/config/shape error, 2 format error,
// 3 numeric or convergence failure.
#include <algorithm>
#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "repsf/io.hpp"
#include "repsf/loss.hpp"
#include "repsf/parallel.hpp"

namespace {

using namespace repsf;

enum ExitCode : int { kOk = 0, kInvalid = 1, kFormat = 2, kNumeric = 3 };

int exit_code_for(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::kFormat: return kFormat;
    case ErrorKind::kNumeric: return kNumeric;
    default: return kInvalid;
  }
}

// Published reference figures for the full network.
constexpr double kReferenceParamsM = 26.06;
constexpr double kReferenceGMacs = 62.59;

struct Size {
  int w = 0;
  int h = 0;
};

// "640x480" is width x height.
Size parse_size(const std::string& s) {
  Size out;
  char x = 0;
  std::istringstream in(s);
  if (!(in >> out.w >> x >> out.h) || (x != 'x' && x != 'X') || !in.eof() || out.w <= 0 || out.h <= 0)
    throw ValidationError("--size: expected WxH with positive integers, got '" + s + "'");
  return out;
}

void echo_config(const CLI::App& sub) {
  std::cerr << "# repsf " << sub.get_name() << "\n";
  std::istringstream lines(sub.config_to_str(true, false));
  for (std::string line; std::getline(lines, line);)
    if (!line.empty()) std::cerr << "#   " << line << "\n";
  std::cerr << "#   threads=" << worker_count() << "\n";
}

ModelConfig config_or_default(const std::string& path) {
  return path.empty() ? ModelConfig{} : load_config(path);
}

template <typename Fn>
auto with_dtype(DType d, Fn&& fn) {
  return d == DType::kFloat32 ? fn(float{}) : fn(double{});
}

double millis(std::chrono::steady_clock::duration d) {
  return std::chrono::duration<double, std::milli>(d).count();
}

// ---------------------------------------------------------------------------

struct InitArgs {
  std::string config, out, dtype = "f32";
  std::uint64_t seed = 42;
};

int cmd_init(const InitArgs& a) {
  const ModelConfig cfg = config_or_default(a.config);
  return with_dtype(a.dtype == "f64" ? DType::kFloat64 : DType::kFloat32, [&](auto tag) {
    using T = decltype(tag);
    const Model<T> m = build_model<T>(cfg, a.seed);
    save_bundle(a.out, m, false, a.seed);
    std::printf("wrote %s (%s, seed %" PRIu64 ", %lld parameters, branch form)\n", a.out.c_str(),
                to_string(dtype_of<T>()), a.seed, static_cast<long long>(count_params(m, false)));
    return kOk;
  });
}

struct ReparamArgs {
  std::string weights, out;
};

int cmd_reparam(const ReparamArgs& a) {
  const Bytes bytes = read_file(a.weights);
  const BundleInfo info = read_bundle_info(bytes);
  if (info.merged) throw StateError(a.weights + " is already merged");
  return with_dtype(info.dtype, [&](auto tag) {
    using T = decltype(tag);
    const Bundle<T> b = decode_bundle<T>(bytes);
    const Model<T> merged = model_inference_form(b.model);
    save_bundle(a.out, merged, true, info.seed);
    std::printf("wrote %s: %lld -> %lld parameters\n", a.out.c_str(),
                static_cast<long long>(count_params(b.model, false)),
                static_cast<long long>(count_params(merged, true)));
    return kOk;
  });
}

struct EquivArgs {
  std::string weights, merged, size = "64x64";
  int trials = 3;
  std::optional<double> tol;
  std::uint64_t seed = 1;
};

void print_report(const std::string& name, const EquivalenceReport& r) {
  std::printf("%-40s trials %d  max_abs %.3e  max_rel %.3e  tol %.1e  %s\n", name.c_str(), r.trials,
              r.max_abs_diff, r.max_rel_diff, r.tolerance, r.passed ? "PASS" : "FAIL");
}

int cmd_equiv(const EquivArgs& a) {
  const Bytes bytes = read_file(a.weights);
  const BundleInfo info = read_bundle_info(bytes);
  if (info.merged) throw StateError(a.weights + " holds merged weights; equiv needs the branch form");
  if (a.trials < 1) throw ValidationError("--trials: must be >= 1");
  const Size size = parse_size(a.size);
  return with_dtype(info.dtype, [&](auto tag) {
    using T = decltype(tag);
    const double tol = a.tol.value_or(std::is_same_v<T, float> ? 1e-4 : 1e-10);
    const Bundle<T> b = decode_bundle<T>(bytes);
    Model<T> merged;
    if (a.merged.empty()) {
      merged = model_inference_form(b.model);
    } else {
      const Bytes mbytes = read_file(a.merged);
      const BundleInfo minfo = read_bundle_info(mbytes);
      if (!minfo.merged) throw StateError(a.merged + " is not a merged bundle");
      if (minfo.dtype != info.dtype) throw ValidationError("bundles differ in dtype");
      if (config_to_json(minfo.config) != config_to_json(info.config))
        throw ValidationError("bundles were built from different configs");
      merged = decode_bundle<T>(mbytes).model;
    }

    bool ok = true;
    std::uint64_t seed = a.seed;
    for (std::size_t s = 0; s < 4; ++s)
      for (std::size_t u = 0; u < b.model.backbone.stages[s].units.size(); ++u) {
        RepBlockSpec<T> block = b.model.backbone.stages[s].units[u].mixer;
        block.merged = merged.backbone.stages[s].units[u].mixer.merged;
        const auto r = equivalence_check(block, a.trials, tol, seed++);
        ok = ok && r.passed;
        print_report("backbone.stages." + std::to_string(s) + ".units." + std::to_string(u) + ".mixer", r);
      }

    EquivalenceReport e2e;
    e2e.trials = a.trials;
    e2e.tolerance = tol;
    SplitMix64 rng(seed);
    for (int t = 0; t < a.trials; ++t) {
      const auto img = random_tensor<T>({1, 3, static_cast<std::size_t>(size.h), static_cast<std::size_t>(size.w)},
                                        rng, 0.0, 1.0);
      const auto x = repsfnet_logits(b.model, img, false);
      const auto y = repsfnet_logits(merged, img, true);
      for (std::size_t i = 0; i < x.numel(); ++i) {
        const double d = std::abs(static_cast<double>(x[i]) - static_cast<double>(y[i]));
        e2e.max_abs_diff = std::max(e2e.max_abs_diff, d);
        e2e.max_rel_diff = std::max(e2e.max_rel_diff, d / std::max(std::abs(static_cast<double>(x[i])), 1e-30));
      }
    }
    e2e.passed = e2e.max_abs_diff <= tol;
    ok = ok && e2e.passed;
    print_report("end-to-end logits " + a.size, e2e);
    std::printf("%s\n", ok ? "equivalent" : "NOT equivalent");
    return ok ? kOk : kNumeric;
  });
}

struct GenDensityArgs {
  std::string ann, out, pgm;
  double sigma = 4.0, truncation = 4.0, beta = 0.3;
  std::optional<double> pgm_cap;
  bool adaptive = false, no_renormalize = false;
  int k = 3;
  std::size_t stride = 0;
};

int cmd_gen_density(const GenDensityArgs& a) {
  const PointAnnotations ann = load_annotations(a.ann);
  GaussianConfig g;
  g.mode = a.adaptive ? SigmaMode::kAdaptive : SigmaMode::kFixed;
  g.sigma = a.sigma;
  g.truncation = a.truncation;
  g.k_nn = a.k;
  g.beta = a.beta;
  g.renormalize = !a.no_renormalize;
  g.validate();
  std::vector<double> sigmas(ann.points.size(), a.sigma);
  if (a.adaptive) {
    const AdaptiveSigmas s = adaptive_sigmas(ann, a.k, a.beta, a.sigma);
    if (s.fallbacks > 0)
      std::cerr << "warning: " << s.fallbacks << " of " << ann.points.size()
                << " point(s) lack usable neighbours; using the fixed sigma " << a.sigma << "\n";
    sigmas = s.sigmas;
  }
  DensityMap dm = generate_density(ann, sigmas, g);
  if (a.stride > 0) dm = align_to_output(dm, a.stride);
  save_density(a.out, dm);
  if (!a.pgm.empty()) export_pgm(dm, a.pgm, a.pgm_cap ? PgmScale::fixed(*a.pgm_cap) : PgmScale::automatic());
  std::printf("map: %zux%zu\n", dm.w, dm.h);
  std::printf("count: %.6f\n", dm.count());
  return kOk;
}

struct ForwardArgs {
  std::string weights, input, out;
  bool merged = false;
};

int cmd_forward(const ForwardArgs& a) {
  const Bytes bytes = read_file(a.weights);
  const BundleInfo info = read_bundle_info(bytes);
  return with_dtype(info.dtype, [&](auto tag) {
    using T = decltype(tag);
    Bundle<T> b = decode_bundle<T>(bytes);
    const Tensor4<T> img = load_tensor<T>(a.input);
    if (info.merged && !a.merged) std::cerr << "note: bundle holds merged weights; running merged\n";
    const bool merged = a.merged || info.merged;
    if (merged && !info.merged) b.model = model_inference_form(b.model);
    const auto t0 = std::chrono::steady_clock::now();
    const Tensor4<T> pred = repsfnet_forward(b.model, img, merged);
    const auto t1 = std::chrono::steady_clock::now();
    save_tensor(a.out, pred);
    double count = 0.0;
    for (std::size_t i = 0; i < pred.numel(); ++i) count += static_cast<double>(pred[i]);
    std::printf("map: %zux%zu\n", pred.w(), pred.h());
    std::printf("count: %.6f\n", count);
    std::cerr << "forward (" << (merged ? "merged" : "branch") << ") " << millis(t1 - t0) << " ms\n";
    return kOk;
  });
}

struct LossArgs {
  std::string pred, gt, count_mode = "l1";
  double epsilon = 0.01, tol = 1e-6, count_weight = 1.0, ot_weight = 1.0;
  int iters = 500;
};

int cmd_loss(const LossArgs& a) {
  const DensityMap pred = load_density(a.pred);
  const DensityMap gt = load_density(a.gt);
  SinkhornConfig cfg;
  cfg.epsilon = a.epsilon;
  cfg.max_iters = a.iters;
  cfg.tol = a.tol;
  const LossReport r = total_loss(pred, gt, cfg, {a.count_weight, a.ot_weight},
                                  a.count_mode == "l2" ? CountLossMode::kL2 : CountLossMode::kL1);
  const Json out = {{"pred_count", r.pred_count}, {"gt_count", r.gt_count}, {"count_loss", r.count_loss},
                    {"ot_loss", r.ot_loss},       {"total", r.total},       {"iterations", r.iterations},
                    {"violation", r.violation},   {"converged", r.converged}};
  std::printf("%s\n", out.dump().c_str());
  if (!r.converged) {
    std::cerr << "error: Sinkhorn did not converge in " << r.iterations << " iterations (violation "
              << r.violation << " > " << a.tol << ")\n";
    return kNumeric;
  }
  return kOk;
}

struct EvalArgs {
  std::string pred_list, gt_list;
};

// A JSON array of counts, or of tensor paths (relative to the list file)
// whose sums are the counts.
std::vector<double> load_counts(const std::string& path) {
  const Json doc = parse_json(read_text_file(path), path);
  if (!doc.is_array()) throw FormatError(path + ": expected a JSON array");
  const std::filesystem::path dir = std::filesystem::path(path).parent_path();
  std::vector<double> out;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const Json& v = doc[i];
    if (v.is_number()) {
      out.push_back(v.get<double>());
    } else if (v.is_string()) {
      std::filesystem::path p = v.get<std::string>();
      if (p.is_relative()) p = dir / p;
      out.push_back(load_density(p.string()).count());
    } else {
      throw FormatError(path + "[" + std::to_string(i) + "]: expected a number or a tensor path");
    }
  }
  return out;
}

int cmd_eval(const EvalArgs& a) {
  const MetricsReport r = eval_metrics(load_counts(a.pred_list), load_counts(a.gt_list));
  const Json out = {{"mae", r.mae}, {"mse", r.mse}, {"n", r.n}};
  std::printf("%s\n", out.dump().c_str());
  return kOk;
}

struct StatsArgs {
  std::string config, size;
  bool json = false;
};

int cmd_stats(const StatsArgs& a) {
  const ModelConfig cfg = config_or_default(a.config);
  const Size size = parse_size(a.size);
  const int stride = cfg.backbone.total_stride();
  if (size.w % stride != 0 || size.h % stride != 0)
    throw GeometryError("--size " + a.size + " is not divisible by the output stride " + std::to_string(stride));
  const Model<float> m = model_skeleton<float>(cfg);
  const double pb = static_cast<double>(count_params(m, false)) / 1e6;
  const double pm = static_cast<double>(count_params(m, true)) / 1e6;
  const double mb = static_cast<double>(count_macs(m, size.h, size.w, false)) / 1e9;
  const double mm = static_cast<double>(count_macs(m, size.h, size.w, true)) / 1e9;
  if (a.json) {
    const Json out = {{"size", a.size},
                      {"params_m", {{"branch", pb}, {"merged", pm}, {"reference", kReferenceParamsM}}},
                      {"gmacs", {{"branch", mb}, {"merged", mm}, {"reference", kReferenceGMacs}}}};
    std::printf("%s\n", out.dump().c_str());
    return kOk;
  }
  std::printf("input %dx%d (W x H) -> density map %dx%d\n", size.w, size.h, size.w / stride, size.h / stride);
  std::printf("%-8s %12s %12s %12s %22s\n", "", "branch", "merged", "reference", "gap (merged - ref)");
  std::printf("%-8s %10.3f M %10.3f M %10.2f M %+10.3f M (%+6.1f%%)\n", "params", pb, pm, kReferenceParamsM,
              pm - kReferenceParamsM, 100.0 * (pm - kReferenceParamsM) / kReferenceParamsM);
  std::printf("%-8s %10.3f G %10.3f G %10.2f G %+10.3f G (%+6.1f%%)\n", "MACs", mb, mm, kReferenceGMacs,
              mm - kReferenceGMacs, 100.0 * (mm - kReferenceGMacs) / kReferenceGMacs);
  std::printf("reference figures are the published ones (input size unstated); shown for comparison only\n");
  return kOk;
}

struct BenchArgs {
  std::string weights, mode = "merged";
  std::vector<std::string> sizes{"640x480"};
  int runs = 50, warmup = 5;
  bool standard_sizes = false;
  std::uint64_t seed = 7;
};

// 1600x1200 is not a multiple of 32; its height is cropped to 1184.
const std::vector<std::string> kStandardSizes{"640x480", "1280x960", "1600x1184"};

int cmd_bench(const BenchArgs& a) {
  if (a.runs < 1) throw ValidationError("--runs: must be >= 1");
  if (a.warmup < 0) throw ValidationError("--warmup: must be >= 0");
  const Bytes bytes = read_file(a.weights);
  const BundleInfo info = read_bundle_info(bytes);
  if (info.merged && a.mode != "merged")
    throw StateError(a.weights + " holds merged weights only; branch timing needs the branch bundle");
  const std::vector<std::string>& names = a.standard_sizes ? kStandardSizes : a.sizes;
  std::vector<Size> sizes;
  for (const auto& s : names) sizes.push_back(parse_size(s));
  return with_dtype(info.dtype, [&](auto tag) {
    using T = decltype(tag);
    const Bundle<T> b = decode_bundle<T>(bytes);
    const Model<T> merged = info.merged ? b.model : model_inference_form(b.model);
    std::vector<std::pair<std::string, bool>> modes;
    if (a.mode != "merged") modes.emplace_back("branch", false);
    if (a.mode != "branch") modes.emplace_back("merged", true);
    SplitMix64 rng(a.seed);
    for (std::size_t si = 0; si < sizes.size(); ++si) {
      const Size sz = sizes[si];
      const auto img = random_tensor<T>({1, 3, static_cast<std::size_t>(sz.h), static_cast<std::size_t>(sz.w)},
                                        rng, 0.0, 1.0);
      for (const auto& [name, is_merged] : modes) {
        const Model<T>& m = is_merged ? merged : b.model;
        for (int i = 0; i < a.warmup; ++i) repsfnet_forward(m, img, is_merged);
        std::vector<double> ms;
        for (int i = 0; i < a.runs; ++i) {
          const auto t0 = std::chrono::steady_clock::now();
          repsfnet_forward(m, img, is_merged);
          ms.push_back(millis(std::chrono::steady_clock::now() - t0));
        }
        std::sort(ms.begin(), ms.end());
        const std::size_t n = ms.size();
        const double median = n % 2 ? ms[n / 2] : 0.5 * (ms[n / 2 - 1] + ms[n / 2]);
        const double p95 = ms[static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n))) - 1];
        std::printf("%-10s %-7s runs %3d  median %10.2f ms  p95 %10.2f ms\n", names[si].c_str(), name.c_str(),
                    a.runs, median, p95);
      }
    }
    return kOk;
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"repsf: large-kernel crowd density network tools"};
  app.require_subcommand(1);

  InitArgs init;
  auto* s_init = app.add_subcommand("init", "build a model from a config and write a weight bundle");
  s_init->add_option("--config", init.config, "model config JSON (default config when omitted)");
  s_init->add_option("--seed", init.seed, "initialization seed")->capture_default_str();
  s_init->add_option("--out", init.out, "output bundle")->required();
  s_init->add_option("--dtype", init.dtype, "weight precision")->check(CLI::IsMember({"f32", "f64"}))->capture_default_str();

  ReparamArgs rep;
  auto* s_rep = app.add_subcommand("reparam", "merge every rep block and fold batch norms");
  s_rep->add_option("--weights", rep.weights, "branch-form bundle")->required();
  s_rep->add_option("--out", rep.out, "merged bundle")->required();

  EquivArgs eq;
  auto* s_eq = app.add_subcommand("equiv", "check merged kernels against the branch form");
  s_eq->add_option("--weights", eq.weights, "branch-form bundle")->required();
  s_eq->add_option("--merged", eq.merged, "merged bundle to check (merged in memory when omitted)");
  s_eq->add_option("--trials", eq.trials, "random inputs per check")->capture_default_str();
  s_eq->add_option("--tol", eq.tol, "absolute tolerance (1e-4 for f32, 1e-10 for f64)");
  s_eq->add_option("--seed", eq.seed, "input seed")->capture_default_str();
  s_eq->add_option("--size", eq.size, "end-to-end input size WxH")->capture_default_str();

  GenDensityArgs gd;
  auto* s_gd = app.add_subcommand("gen-density", "ground-truth density map from point annotations");
  s_gd->add_option("--ann", gd.ann, "annotation JSON")->required();
  s_gd->add_option("--sigma", gd.sigma, "Gaussian sigma in pixels")->capture_default_str();
  s_gd->add_flag("--adaptive", gd.adaptive, "geometry-adaptive sigma from k nearest neighbours");
  s_gd->add_option("--k", gd.k, "neighbours for --adaptive")->capture_default_str();
  s_gd->add_option("--beta", gd.beta, "sigma = beta * mean neighbour distance")->capture_default_str();
  s_gd->add_option("--truncation", gd.truncation, "kernel radius in sigmas")->capture_default_str();
  s_gd->add_flag("--no-renormalize", gd.no_renormalize, "keep the analytic kernel mass");
  s_gd->add_option("--out", gd.out, "output tensor")->required();
  s_gd->add_option("--pgm", gd.pgm, "also export a 16-bit PGM");
  s_gd->add_option("--pgm-cap", gd.pgm_cap, "fixed PGM scale cap (auto min-max when omitted)");
  s_gd->add_option("--stride", gd.stride, "sum-pool to the network output stride (0 = off)")->capture_default_str();

  ForwardArgs fw;
  auto* s_fw = app.add_subcommand("forward", "predict a density map for an image tensor");
  s_fw->add_option("--weights", fw.weights, "weight bundle")->required();
  s_fw->add_option("--input", fw.input, "image tensor (1, 3, H, W)")->required();
  s_fw->add_option("--out", fw.out, "prediction tensor")->required();
  s_fw->add_flag("--merged", fw.merged, "run merged kernels (merges branch bundles in memory)");

  LossArgs ls;
  auto* s_ls = app.add_subcommand("loss", "count + optimal transport loss between two maps");
  s_ls->add_option("--pred", ls.pred, "predicted map")->required();
  s_ls->add_option("--gt", ls.gt, "ground-truth map")->required();
  s_ls->add_option("--epsilon", ls.epsilon, "entropic regularization")->capture_default_str();
  s_ls->add_option("--iters", ls.iters, "Sinkhorn iteration budget")->capture_default_str();
  s_ls->add_option("--tol", ls.tol, "marginal violation tolerance")->capture_default_str();
  s_ls->add_option("--count-weight", ls.count_weight, "weight of the count term")->capture_default_str();
  s_ls->add_option("--ot-weight", ls.ot_weight, "weight of the transport term")->capture_default_str();
  s_ls->add_option("--count-mode", ls.count_mode, "count penalty")->check(CLI::IsMember({"l1", "l2"}))->capture_default_str();

  EvalArgs ev;
  auto* s_ev = app.add_subcommand("eval", "MAE and RMSE over lists of counts");
  s_ev->add_option("--pred-list", ev.pred_list, "JSON array of counts or map paths")->required();
  s_ev->add_option("--gt-list", ev.gt_list, "JSON array of counts or map paths")->required();

  StatsArgs st;
  auto* s_st = app.add_subcommand("stats", "parameter and MAC counts");
  s_st->add_option("--config", st.config, "model config JSON (default config when omitted)");
  s_st->add_option("--size", st.size, "input size WxH")->required();
  s_st->add_flag("--json", st.json, "print JSON");

  BenchArgs bn;
  auto* s_bn = app.add_subcommand("bench", "forward latency");
  s_bn->add_option("--weights", bn.weights, "weight bundle")->required();
  s_bn->add_option("--size", bn.sizes, "input size WxH (repeatable)")->capture_default_str();
  s_bn->add_option("--runs", bn.runs, "timed runs")->capture_default_str();
  s_bn->add_option("--warmup", bn.warmup, "untimed runs")->capture_default_str();
  s_bn->add_option("--mode", bn.mode, "which form to time")->check(CLI::IsMember({"merged", "branch", "both"}))->capture_default_str();
  s_bn->add_flag("--standard-sizes", bn.standard_sizes, "time 640x480, 1280x960 and 1600x1184");
  s_bn->add_option("--seed", bn.seed, "input seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kInvalid;
  }

  try {
    for (CLI::App* sub : app.get_subcommands()) echo_config(*sub);
    if (s_init->parsed()) return cmd_init(init);
    if (s_rep->parsed()) return cmd_reparam(rep);
    if (s_eq->parsed()) return cmd_equiv(eq);
    if (s_gd->parsed()) return cmd_gen_density(gd);
    if (s_fw->parsed()) return cmd_forward(fw);
    if (s_ls->parsed()) return cmd_loss(ls);
    if (s_ev->parsed()) return cmd_eval(ev);
    if (s_st->parsed()) return cmd_stats(st);
    if (s_bn->parsed()) return cmd_bench(bn);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::bad_alloc&) {
    std::cerr << "error: out of memory\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumeric;
  }
  return kInvalid;
}
