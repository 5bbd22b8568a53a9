#include <doctest.h>
#include <json.hpp>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "bya/eval.hpp"
#include "bya/image_export.hpp"
#include "bya/model.hpp"

using namespace bya;
namespace fs = std::filesystem;

namespace {

const fs::path& work() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "bya_cli_unit";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

/// Exit code of the CLI with `args`; stdout goes to `out` when given.
int run(const std::string& args, const fs::path& out = {}) {
  std::string cmd = std::string(BYA_CLI_PATH) + " " + args;
  cmd += out.empty() ? " > /dev/null" : " > " + out.string();
  cmd += " 2> " + (work() / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string w(const std::string& name) { return (work() / name).string(); }

}  // namespace

TEST_CASE("cli end to end on a small dataset") {
  REQUIRE(run("gen-data --count 16 --seed 7 --out " + w("data")) == 0);
  const nlohmann::json manifest = nlohmann::json::parse(slurp(work() / "data" / "manifest.json"));
  CHECK(manifest["clips"].size() == 16);
  REQUIRE(run("gen-data --count 16 --seed 7 --out " + w("data2")) == 0);
  CHECK(slurp(work() / "data" / "manifest.json") == slurp(work() / "data2" / "manifest.json"));
  CHECK(run("gen-data --count 16 --mix 2.0 --out " + w("data3")) == 2);

  const std::string data = " --data " + w("data/manifest.json");
  REQUIRE(run("train --stage 1 --steps 3 --batch 2 --out " + w("ck1") + data) == 0);
  std::ifstream log1(work() / "ck1" / "log.jsonl");
  int lines = 0;
  for (std::string line; std::getline(log1, line);) ++lines;
  CHECK(lines == 3);
  CHECK(run("train --stage 2 --steps 2 --batch 2 --out " + w("ck2") + data) == 2);
  CHECK(run("train --stage 3 --steps 2 --batch 2 --resume " + w("ck1") + " --out " + w("ck3") + data) == 2);
  REQUIRE(run("train --stage 2 --steps 2 --batch 2 --resume " + w("ck1") + " --out " + w("ck2") + data) == 0);
  REQUIRE(run("train --stage 3 --steps 2 --batch 2 --resume " + w("ck2") + " --out " + w("ck3") + data) == 0);
  std::ifstream log3(work() / "ck3" / "log.jsonl");
  for (std::string line; std::getline(log3, line);) CHECK(nlohmann::json::parse(line)["L_router"].get<double>() != 0.0);

  const std::string clip = (work() / "data" / manifest["clips"][0]["path"].get<std::string>()).string();
  const std::string ck3 = " --ckpt " + w("ck3") + " --clip " + clip;
  REQUIRE(run("sample --mode post --steps 50" + ck3 + " --out " + w("s_post"), work() / "post.txt") == 0);
  CHECK(slurp(work() / "post.txt").find("nfe 200") != std::string::npos);
  REQUIRE(run("sample --mode intra --steps 5 --seed 3" + ck3 + " --out " + w("s_a")) == 0);
  REQUIRE(run("sample --mode intra --steps 5 --seed 3" + ck3 + " --out " + w("s_b")) == 0);
  for (const char* f : {"video.byat", "view.u8.byat", "masks_step4.byat", "result.json"})
    CHECK(slurp(work() / "s_a" / f) == slurp(work() / "s_b" / f));
  CHECK(run("sample --mode intra --clip " + clip + " --out " + w("s_c")) == 2);
  CHECK(run("sample --mode pre --no-inpaint --steps 2" + ck3 + " --out " + w("s_d")) == 2);
  CHECK(run("sample --mode intra --steps 2 --ckpt " + w("ck2") + " --clip " + clip + " --out " + w("s_e")) == 2);

  REQUIRE(run("eval --ckpt " + w("ck3") + " --split test --mode intra --steps 3 --limit 2 --out " + w("eval.json") + data) == 0);
  const nlohmann::json report = nlohmann::json::parse(slurp(work() / "eval.json"));
  REQUIRE(report["per_clip"].size() >= 1);
  double acc = 0, gt = 0;
  for (const auto& c : report["per_clip"]) acc += c["routing_accuracy"].get<double>(), gt += c["routing_accuracy_gt"].get<double>();
  const double n = static_cast<double>(report["per_clip"].size());
  CHECK(std::abs(report["routing_accuracy"].get<double>() - acc / n) < 1e-9);
  CHECK(gt / n == 1.0);
  CHECK(run("eval --ckpt " + w("ck3") + " --split nothing" + data) == 2);

  REQUIRE(run("inspect-mask --sample-dir " + w("s_a") + " --format png-grid --out " + w("m1.png")) == 0);
  REQUIRE(run("inspect-mask --sample-dir " + w("s_a") + " --format png-grid --out " + w("m2.png")) == 0);
  CHECK(slurp(work() / "m1.png") == slurp(work() / "m2.png"));
  CHECK(slurp(work() / "m1.png").substr(1, 3) == "PNG");
  REQUIRE(run("inspect-mask --sample-dir " + w("s_a") + " --format gif --out " + w("m.gif")) == 0);
  CHECK(slurp(work() / "m.gif").substr(0, 6) == "GIF89a");
  CHECK(run("inspect-mask --sample-dir " + w("nowhere") + " --format gif") == 2);
}

TEST_CASE("eval metrics on ground truth") {
  std::mt19937_64 rng(4);
  const ClipDims dims;
  const ClipRecord clip = gen_clip(make_trajectory(TrajectoryKind::crossing, dims, rng), dims, 4);
  const ModelConfig mc;
  const TokenGridDims grid = mc.dit.grid();
  const std::vector<int> truth = ground_truth_labels(clip.gt_masks, grid, 4, 2);
  const RoutingMask self{grid, 2, std::vector<Matrix<float>>(4, one_hot(truth, 3))};
  for (double iou : mask_iou(self, truth)) CHECK(iou == 1.0);
  CHECK(sync_proxy_margin(clip, clip.video, 1) >= 0.3);
  CHECK(routing_accuracy(clip, clip.video, 1) == 1.0);

  ClipMetrics a, b;
  a.mask_iou = {0.5, 0.7};
  b.mask_iou = {0.9, 0.1};
  a.routing_accuracy = 1.0, b.routing_accuracy = 0.5;
  a.sync_proxy_margin = 0.2, b.sync_proxy_margin = -0.1;
  const EvalReport r = aggregate(RouterMode::intra, {a, b});
  CHECK(r.mask_iou[0] == doctest::Approx(0.7));
  CHECK(r.mask_iou[1] == doctest::Approx(0.4));
  CHECK(r.routing_accuracy == doctest::Approx(0.75));
  CHECK(r.sync_positive_fraction == doctest::Approx(0.5));
}

TEST_CASE("mask images have exact colours and layout") {
  const TokenGridDims grid{8, 4, 4};
  std::vector<int> labels(128);
  for (int s = 0; s < 128; ++s) {
    const TokenIndex i = token_unflatten(s, grid);
    labels[static_cast<std::size_t>(s)] = i.w < 2 ? 0 : (i.h < 2 ? 1 : 2);
  }
  const auto palette = mask_palette(2);
  REQUIRE(palette.size() == 3);
  CHECK(palette[0] == std::array<std::uint8_t, 3>{230, 57, 70});
  CHECK(palette[2] == std::array<std::uint8_t, 3>{40, 40, 40});

  const IndexedImage img = label_grid(labels, grid, 8);
  CHECK(img.width == 8 * 4 * 8);
  CHECK(img.height == 32);
  std::array<int, 3> counts{};
  for (std::uint8_t v : img.index) ++counts[v];
  // Per frame: 8 tokens of class 0, 4 of class 1, 4 background, 64 pixels each.
  CHECK(counts[0] == 8 * 8 * 64);
  CHECK(counts[1] == 8 * 4 * 64);
  CHECK(counts[2] == 8 * 4 * 64);
  // Panels line up frame by frame.
  for (int t = 0; t < 8; ++t) {
    const IndexedImage panel = label_panel(labels, grid, t, 8);
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x)
        CHECK(panel.index[static_cast<std::size_t>(y * 32 + x)] == img.index[static_cast<std::size_t>(y * img.width + t * 32 + x)]);
  }
  CHECK(encode_png(img, palette) == encode_png(img, palette));
  const auto gif = encode_gif({label_panel(labels, grid, 0, 8), label_panel(labels, grid, 1, 8)}, palette);
  CHECK(std::string(gif.begin(), gif.begin() + 6) == "GIF89a");
  CHECK(gif.back() == 0x3B);
}
