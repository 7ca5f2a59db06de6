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


// Drives the repsf binary end to end and checks outputs and exit codes.
#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <string>

#include "repsf/io.hpp"
#include "repsf/rng.hpp"

namespace repsf {
namespace {

namespace fs = std::filesystem;

struct CliResult {
  int code = -1;
  std::string out, err;
};

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::path(REPSF_CLI_WORKDIR) / info->name();
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  CliResult run(const std::string& args) const {
    const std::string cmd = std::string("\"") + REPSF_CLI_PATH + "\" " + args + " >\"" + path("stdout") +
                            "\" 2>\"" + path("stderr") + "\"";
    const int status = std::system(cmd.c_str());
    CliResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = read_text_file(path("stdout"));
    r.err = read_text_file(path("stderr"));
    return r;
  }

  std::string tiny_bundle(const std::string& name = "tiny.rsfw") const {
    const CliResult r = run("init --config \"" + std::string(REPSF_TINY_CONFIG) + "\" --out " + path(name));
    EXPECT_EQ(r.code, 0) << r.err;
    return path(name);
  }

  std::string image(std::size_t h, std::size_t w, std::uint64_t seed = 3) const {
    SplitMix64 rng(seed);
    save_tensor(path("img.rsft"), random_tensor<float>({1, 3, h, w}, rng, 0.0, 1.0));
    return path("img.rsft");
  }

  std::string annotations(int n, double w, double h, std::uint64_t seed = 1) const {
    SplitMix64 rng(seed);
    PointAnnotations ann;
    ann.width = static_cast<int>(w);
    ann.height = static_cast<int>(h);
    for (int i = 0; i < n; ++i) ann.points.push_back({rng.uniform(0, w), rng.uniform(0, h)});
    write_text_file(path("ann.json"), annotations_to_json(ann).dump());
    return path("ann.json");
  }

  fs::path dir_;
};

TEST_F(CliTest, InitTwiceIsByteIdentical) {
  ASSERT_EQ(run("init --seed 42 --out " + path("a.rsfw")).code, 0);
  ASSERT_EQ(run("init --seed 42 --out " + path("b.rsfw")).code, 0);
  EXPECT_TRUE(read_file(path("a.rsfw")) == read_file(path("b.rsfw")));
  ASSERT_EQ(run("init --seed 43 --out " + path("c.rsfw")).code, 0);
  EXPECT_FALSE(read_file(path("a.rsfw")) == read_file(path("c.rsfw")));
}

TEST_F(CliTest, InitRejectsKernel15WithFieldName) {
  write_text_file(path("k15.json"), R"({"backbone": {"stage_kernels": [7, 9, 15, 13]}})");
  const CliResult r = run("init --config " + path("k15.json") + " --out " + path("k.rsfw"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("backbone.stage_kernels"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(path("k.rsfw")));
}

TEST_F(CliTest, EchoesResolvedConfig) {
  const CliResult r = run("init --out " + path("a.rsfw") + " --config " + REPSF_TINY_CONFIG);
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.err.find("# repsf init"), std::string::npos);
  EXPECT_NE(r.err.find("seed=42"), std::string::npos);
  EXPECT_NE(r.err.find("dtype=\"f32\""), std::string::npos);
}

TEST_F(CliTest, UsageErrorsExitOne) {
  EXPECT_EQ(run("init --out " + path("a.rsfw") + " --bogus").code, 1);
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("init --out " + path("a.rsfw") + " --dtype f16").code, 1);
  EXPECT_EQ(run("--help").code, 0);
}

TEST_F(CliTest, TinyConfigForwards) {
  const std::string w = tiny_bundle();
  const CliResult r = run("forward --weights " + w + " --input " + image(64, 96) + " --out " + path("p.rsft"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("map: 3x2"), std::string::npos);
  const Tensor4<float> p = load_tensor<float>(path("p.rsft"));
  EXPECT_EQ(p.shape(), (Shape4{1, 1, 2, 3}));
  for (float v : p.data()) EXPECT_GE(v, 0.0f);

  ASSERT_EQ(run("forward --merged --weights " + w + " --input " + path("img.rsft") + " --out " + path("q.rsft")).code, 0);
  EXPECT_LE(max_abs_diff(p, load_tensor<float>(path("q.rsft"))), 1e-4);
}

TEST_F(CliTest, ForwardRejectsIndivisibleInput) {
  const std::string w = tiny_bundle();
  EXPECT_EQ(run("forward --weights " + w + " --input " + image(48, 64) + " --out " + path("p.rsft")).code, 1);
}

TEST_F(CliTest, ReparamThenEquivPasses) {
  const std::string w = tiny_bundle();
  const CliResult rp = run("reparam --weights " + w + " --out " + path("m.rsfw"));
  ASSERT_EQ(rp.code, 0) << rp.err;
  const BundleInfo branch = read_bundle_info(read_file(w));
  const BundleInfo merged = read_bundle_info(read_file(path("m.rsfw")));
  EXPECT_TRUE(merged.merged);
  EXPECT_FALSE(branch.merged);
  const Bundle<float> b = load_bundle<float>(w);
  const Bundle<float> m = load_bundle<float>(path("m.rsfw"));
  EXPECT_LT(count_params(m.model, true), count_params(b.model, false));

  const CliResult eq = run("equiv --weights " + w + " --merged " + path("m.rsfw") + " --trials 2 --tol 1e-4 --seed 5");
  EXPECT_EQ(eq.code, 0) << eq.out << eq.err;
  EXPECT_NE(eq.out.find("end-to-end"), std::string::npos);
  EXPECT_EQ(eq.out.find("FAIL"), std::string::npos);
}

TEST_F(CliTest, ReparamRejectsMergedInput) {
  const std::string w = tiny_bundle();
  ASSERT_EQ(run("reparam --weights " + w + " --out " + path("m.rsfw")).code, 0);
  EXPECT_EQ(run("reparam --weights " + path("m.rsfw") + " --out " + path("mm.rsfw")).code, 1);
  EXPECT_EQ(run("equiv --weights " + path("m.rsfw")).code, 1);
}

TEST_F(CliTest, TamperedMergedBundleFailsEquiv) {
  const std::string w = tiny_bundle();
  ASSERT_EQ(run("reparam --weights " + w + " --out " + path("m.rsfw")).code, 0);
  Bundle<float> m = load_bundle<float>(path("m.rsfw"));
  auto& kernel = m.model.backbone.stages[2].units[0].mixer.merged->weights;
  kernel[kernel.numel() / 2] += 0.5f;
  save_bundle(path("t.rsfw"), m.model, true, m.info.seed);
  const CliResult r = run("equiv --weights " + w + " --merged " + path("t.rsfw"));
  EXPECT_EQ(r.code, 3) << r.out << r.err;
  EXPECT_NE(r.out.find("FAIL"), std::string::npos);
}

TEST_F(CliTest, CorruptBundleIsFormatError) {
  const std::string w = tiny_bundle();
  Bytes bytes = read_file(w);
  bytes[bytes.size() / 2] ^= 0x40;
  write_file(path("bad.rsfw"), bytes);
  const CliResult r = run("forward --weights " + path("bad.rsfw") + " --input " + image(64, 64) + " --out " + path("p.rsft"));
  EXPECT_EQ(r.code, 2) << r.err;
  EXPECT_NE(r.err.find("format error"), std::string::npos);
  EXPECT_EQ(run("reparam --weights " + path("missing.rsfw") + " --out " + path("x.rsfw")).code, 1);
}

TEST_F(CliTest, GenDensityConservesCount) {
  const CliResult r = run("gen-density --ann " + annotations(37, 640, 480) + " --sigma 4.0 --out " + path("gt.rsft") +
                    " --pgm " + path("gt.pgm"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("count: 37.000000"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("map: 640x480"), std::string::npos);
  EXPECT_NEAR(load_density(path("gt.rsft")).count(), 37.0, 1e-9);
  EXPECT_EQ(read_text_file(path("gt.pgm")).rfind("P5 640 480 65535\n", 0), 0u);
}

TEST_F(CliTest, GenDensityStride32) {
  const CliResult r = run("gen-density --ann " + annotations(37, 640, 480) + " --out " + path("gt.rsft") + " --stride 32");
  ASSERT_EQ(r.code, 0) << r.err;
  const DensityMap dm = load_density(path("gt.rsft"));
  EXPECT_EQ(dm.w, 20u);
  EXPECT_EQ(dm.h, 15u);
  EXPECT_NE(r.out.find("count: 37.000000"), std::string::npos);
}

TEST_F(CliTest, AdaptiveSinglePointFallsBack) {
  const CliResult r = run("gen-density --ann " + annotations(1, 100, 80) + " --adaptive --k 3 --beta 0.3 --out " +
                    path("gt.rsft"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("warning"), std::string::npos);
  EXPECT_NE(r.out.find("count: 1.000000"), std::string::npos);
}

TEST_F(CliTest, LossPrintsReport) {
  const std::string ann = annotations(9, 320, 256);
  ASSERT_EQ(run("gen-density --ann " + ann + " --stride 32 --out " + path("gt.rsft")).code, 0);
  ASSERT_EQ(run("gen-density --ann " + ann + " --sigma 12 --stride 32 --out " + path("p.rsft")).code, 0);
  const CliResult r = run("loss --pred " + path("p.rsft") + " --gt " + path("gt.rsft") + " --epsilon 0.01 --iters 500");
  ASSERT_EQ(r.code, 0) << r.err;
  const Json j = Json::parse(r.out);
  for (const char* key : {"pred_count", "gt_count", "count_loss", "ot_loss", "total", "iterations", "violation",
                          "converged"})
    EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_TRUE(j["converged"].get<bool>());
  EXPECT_LE(j["violation"].get<double>(), 1e-6);
  EXPECT_NEAR(j["gt_count"].get<double>(), 9.0, 1e-9);
  EXPECT_GT(j["ot_loss"].get<double>(), 0.0);
}

TEST_F(CliTest, LossNonConvergenceExitsThree) {
  const std::string ann = annotations(9, 320, 256);
  ASSERT_EQ(run("gen-density --ann " + ann + " --stride 32 --out " + path("gt.rsft")).code, 0);
  ASSERT_EQ(run("gen-density --ann " + annotations(4, 320, 256, 9) + " --stride 32 --out " + path("p.rsft")).code, 0);
  const CliResult r = run("loss --pred " + path("p.rsft") + " --gt " + path("gt.rsft") + " --iters 1");
  EXPECT_EQ(r.code, 3);
  const Json j = Json::parse(r.out);
  EXPECT_FALSE(j["converged"].get<bool>());
  EXPECT_EQ(j["iterations"].get<int>(), 1);
}

TEST_F(CliTest, LossShapeMismatchExitsOne) {
  const std::string ann = annotations(3, 320, 256);
  ASSERT_EQ(run("gen-density --ann " + ann + " --stride 32 --out " + path("a.rsft")).code, 0);
  ASSERT_EQ(run("gen-density --ann " + ann + " --stride 16 --out " + path("b.rsft")).code, 0);
  EXPECT_EQ(run("loss --pred " + path("a.rsft") + " --gt " + path("b.rsft")).code, 1);
}

TEST_F(CliTest, EvalExample) {
  write_text_file(path("p.json"), "[10, 20]");
  write_text_file(path("g.json"), "[12, 17]");
  const CliResult r = run("eval --pred-list " + path("p.json") + " --gt-list " + path("g.json"));
  ASSERT_EQ(r.code, 0) << r.err;
  const Json j = Json::parse(r.out);
  EXPECT_DOUBLE_EQ(j["mae"].get<double>(), 2.5);
  EXPECT_NEAR(j["mse"].get<double>(), 2.5495097567963922, 1e-15);
  EXPECT_EQ(j["n"].get<int>(), 2);
}

TEST_F(CliTest, EvalAcceptsMapPaths) {
  ASSERT_EQ(run("gen-density --ann " + annotations(5, 64, 64) + " --out " + path("m.rsft")).code, 0);
  write_text_file(path("p.json"), R"(["m.rsft", 4])");
  write_text_file(path("g.json"), "[7, 4]");
  const CliResult r = run("eval --pred-list " + path("p.json") + " --gt-list " + path("g.json"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NEAR(Json::parse(r.out)["mae"].get<double>(), 1.0, 1e-12);
  write_text_file(path("g.json"), "[7]");
  EXPECT_EQ(run("eval --pred-list " + path("p.json") + " --gt-list " + path("g.json")).code, 1);
  write_text_file(path("g.json"), "{\"a\": 1}");
  EXPECT_EQ(run("eval --pred-list " + path("p.json") + " --gt-list " + path("g.json")).code, 2);
}

TEST_F(CliTest, StatsPrintsReference) {
  const CliResult r = run("stats --size 640x480");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("26.06 M"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("62.59 G"), std::string::npos);
  EXPECT_NE(r.out.find("20x15"), std::string::npos);
  const CliResult j = run("stats --json --size 640x480");
  ASSERT_EQ(j.code, 0);
  const Json s = Json::parse(j.out);
  EXPECT_LT(s["gmacs"]["merged"].get<double>(), s["gmacs"]["branch"].get<double>());
  EXPECT_LT(s["params_m"]["merged"].get<double>(), s["params_m"]["branch"].get<double>());
  EXPECT_EQ(run("stats --size 641x480").code, 1);
  EXPECT_EQ(run("stats --size big").code, 1);
  EXPECT_EQ(run("stats").code, 1);
}

TEST_F(CliTest, BenchReportsBothForms) {
  const std::string w = tiny_bundle();
  const CliResult r = run("bench --weights " + w + " --size 64x64 --runs 3 --warmup 1 --mode both");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("branch"), std::string::npos);
  EXPECT_NE(r.out.find("merged"), std::string::npos);
  EXPECT_NE(r.out.find("median"), std::string::npos);
  ASSERT_EQ(run("reparam --weights " + w + " --out " + path("m.rsfw")).code, 0);
  EXPECT_EQ(run("bench --weights " + path("m.rsfw") + " --size 64x64 --runs 1 --mode branch").code, 1);
}

TEST_F(CliTest, DoublePrecisionBundles) {
  const CliResult r = run("init --dtype f64 --config " + std::string(REPSF_TINY_CONFIG) + " --out " + path("d.rsfw"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_bundle_info(read_file(path("d.rsfw"))).dtype, DType::kFloat64);
  const CliResult eq = run("equiv --weights " + path("d.rsfw") + " --trials 1");
  EXPECT_EQ(eq.code, 0) << eq.out;
  EXPECT_NE(eq.out.find("tol 1.0e-10"), std::string::npos);
}

}  // namespace
}  // namespace repsf
