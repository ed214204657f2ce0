#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <fcntl.h>
#include <sys/resource.h>
#include <sys/wait.h>
#include <unistd.h>

#include "support.hpp"
#include "txm/metrics.hpp"
#include "txm/phantom.hpp"
#include "txm/stack.hpp"
#include "txm/xanes.hpp"

namespace fs = std::filesystem;
using namespace txm;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

// Runs the CLI through the shell, capturing stdout and stderr together.
Run txmsum(const std::string& args, const testing::TempDir& dir)
{
  const fs::path log = dir / "cli.log";
  const std::string cmd = std::string("\"") + TXMSUM_BIN + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  return r;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

nlohmann::json read_json(const fs::path& p)
{
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

void write_spec(const fs::path& path, nlohmann::json spec)
{
  std::ofstream(path) << spec.dump();
}

nlohmann::json demo_spec()
{
  std::ifstream in(std::string(TXM_DATA_DIR) + "/demo_phantom.json");
  return nlohmann::json::parse(in);
}

bool same_bytes(const fs::path& a, const fs::path& b) { return testing::read_bytes(a) == testing::read_bytes(b); }

} // namespace

TEST_CASE("usage errors exit with 1, data errors with 2")
{
  testing::TempDir dir;
  CHECK(txmsum("", dir).code == 1);
  CHECK(txmsum("frobnicate", dir).code == 1);
  CHECK(txmsum("--help", dir).code == 0);
  CHECK(txmsum("denoise", dir).code == 1);
  save_stack(testing::random_stack(8, 8, 8, 1), dir / "s");
  CHECK(txmsum("denoise " + q(dir / "s") + " " + q(dir / "o") + " --method nope", dir).code == 1);
  CHECK(txmsum("denoise " + q(dir / "s") + " " + q(dir / "o") + " --denoiser median2d:4", dir).code == 1);
  CHECK(txmsum("denoise " + q(dir / "s") + " " + q(dir / "o") + " --rank 0", dir).code == 1);
  CHECK(txmsum("denoise " + q(dir / "missing") + " " + q(dir / "o"), dir).code == 2);
  std::ofstream(dir / "broken.json") << R"({"width": 8, "height": 8, "frames": 8, "dtype": "f32le"})";
  std::ofstream(dir / "broken.f32") << "abc";
  CHECK(txmsum("denoise " + q(dir / "broken") + " " + q(dir / "o"), dir).code == 2);
  write_spec(dir / "bad_spec.json", {{"colour", "red"}});
  CHECK(txmsum("simulate " + q(dir / "bad_spec.json") + " " + q(dir / "p"), dir).code == 1);
}

TEST_CASE("simulate is deterministic and metrics reproduce the noisy PSNR")
{
  testing::TempDir dir;
  write_spec(dir / "demo.json", demo_spec());
  REQUIRE(txmsum("simulate " + q(dir / "demo.json") + " " + q(dir / "a"), dir).code == 0);
  REQUIRE(txmsum("simulate " + q(dir / "demo.json") + " " + q(dir / "b"), dir).code == 0);
  CHECK(same_bytes(dir / "a.f32", dir / "b.f32"));
  CHECK(same_bytes(dir / "a.json", dir / "b.json"));
  CHECK(same_bytes(dir / "a_clean.f32", dir / "b_clean.f32"));
  CHECK(same_bytes(dir / "a_truth" / "shifts.csv", dir / "b_truth" / "shifts.csv"));
  CHECK(fs::exists(dir / "a_truth" / "gt_edge.json"));
  CHECK(fs::exists(dir / "a_truth" / "labels.json"));

  const Run m = txmsum("metrics " + q(dir / "a") + " " + q(dir / "a_clean"), dir);
  REQUIRE(m.code == 0);
  const auto j = nlohmann::json::parse(m.out);
  CHECK(std::abs(j["fpsnr"].get<double>() - 12.57) <= 0.1);
}

TEST_CASE("simulate honours the sampling fraction")
{
  testing::TempDir dir;
  auto spec = demo_spec();
  spec["width"] = 32;
  spec["height"] = 32;
  spec["fraction"] = 0.1;
  write_spec(dir / "s.json", spec);
  REQUIRE(txmsum("simulate " + q(dir / "s.json") + " " + q(dir / "p"), dir).code == 0);
  CHECK(read_header(dir / "p").frames == 12); // ceil(0.1 * 117)
}

TEST_CASE("denoise on the demo phantom, and svd equals identity SUM bitwise")
{
  testing::TempDir dir;
  write_spec(dir / "demo.json", demo_spec());
  REQUIRE(txmsum("simulate " + q(dir / "demo.json") + " " + q(dir / "p"), dir).code == 0);

  const Run sum = txmsum("denoise " + q(dir / "p") + " " + q(dir / "sum") + " --method sum --rank auto", dir);
  REQUIRE(sum.code == 0);
  const auto report = read_json(dir / "sum_report.json");
  CHECK(report["selected_k"].get<int>() >= 1);
  CHECK(report["method"] == "sum");
  CHECK(report["sigma_source"] == "estimated");

  REQUIRE(txmsum("denoise " + q(dir / "p") + " " + q(dir / "svd") + " --method svd", dir).code == 0);
  REQUIRE(txmsum("denoise " + q(dir / "p") + " " + q(dir / "ident") + " --method sum --denoiser identity --rank auto", dir).code == 0);
  CHECK(same_bytes(dir / "svd.f32", dir / "ident.f32"));
  CHECK(same_bytes(dir / "svd.json", dir / "ident.json"));

  // Re-running overwrites with identical bytes.
  REQUIRE(txmsum("denoise " + q(dir / "p") + " " + q(dir / "sum2") + " --method sum --rank auto", dir).code == 0);
  CHECK(same_bytes(dir / "sum.f32", dir / "sum2.f32"));

  const Run m = txmsum("metrics " + q(dir / "sum") + " " + q(dir / "p_clean"), dir);
  REQUIRE(m.code == 0);
  CHECK(nlohmann::json::parse(m.out)["fpsnr"].get<double>() > 25.0);
}

TEST_CASE("denoise with fixed rank, given sigma and streaming")
{
  testing::TempDir dir;
  auto spec = demo_spec();
  spec["width"] = 48;
  spec["height"] = 40;
  spec["frames"] = 40;
  write_spec(dir / "s.json", spec);
  REQUIRE(txmsum("simulate " + q(dir / "s.json") + " " + q(dir / "p"), dir).code == 0);
  REQUIRE(txmsum("denoise " + q(dir / "p") + " " + q(dir / "k3") + " --rank 3 --sigma 60 --denoiser wavelet:2", dir).code == 0);
  const auto r = read_json(dir / "k3_report.json");
  CHECK(r["selected_k"] == 3);
  CHECK(r["sigma"] == 60.0);
  CHECK(r["sigma_source"] == "given");

  const std::string common = " --sigma 60 --denoiser wavelet:2 --factorization rsvd:8,4,1,5";
  REQUIRE(txmsum("denoise " + q(dir / "p") + " " + q(dir / "mem") + common, dir).code == 0);
  REQUIRE(txmsum("denoise " + q(dir / "p") + " " + q(dir / "str") + common + " --streaming --block 3", dir).code == 0);
  CHECK(same_bytes(dir / "mem.f32", dir / "str.f32"));
  CHECK(txmsum("denoise " + q(dir / "p") + " " + q(dir / "x") + " --streaming", dir).code == 1);
}

TEST_CASE("medfilt3 through the CLI matches a brute-force median")
{
  testing::TempDir dir;
  const ImageStack s = testing::random_stack(6, 5, 4, 2);
  save_stack(s, dir / "s");
  REQUIRE(txmsum("denoise " + q(dir / "s") + " " + q(dir / "m") + " --method medfilt3 --window 3", dir).code == 0);
  const ImageStack out = load_stack(dir / "m");
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t y = 0; y < 5; ++y)
      for (std::size_t x = 0; x < 6; ++x) {
        std::vector<float> v;
        for (int dt = -1; dt <= 1; ++dt)
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx)
              v.push_back(s.at(static_cast<std::size_t>(reflect_index(static_cast<std::ptrdiff_t>(x) + dx, 6)),
                               static_cast<std::size_t>(reflect_index(static_cast<std::ptrdiff_t>(y) + dy, 5)),
                               static_cast<std::size_t>(reflect_index(static_cast<std::ptrdiff_t>(t) + dt, 4))));
        std::nth_element(v.begin(), v.begin() + 13, v.end());
        CHECK(out.at(x, y, t) == v[13]);
      }
  CHECK(txmsum("denoise " + q(dir / "s") + " " + q(dir / "m") + " --method medfilt3 --window 7", dir).code == 1);
}

TEST_CASE("fit, register and map metrics")
{
  testing::TempDir dir;
  auto spec = demo_spec();
  spec["width"] = 64;
  spec["height"] = 64;
  spec["frames"] = 60;
  spec["sigma"] = 0;
  spec["jitter"] = 4;
  write_spec(dir / "s.json", spec);
  REQUIRE(txmsum("simulate " + q(dir / "s.json") + " " + q(dir / "p"), dir).code == 0);
  const fs::path truth = dir / "p_truth";

  const Run fit = txmsum("fit " + q(dir / "p_clean") + " " + q(truth / "library.csv") + " " + q(truth / "states.json") + " " +
                             q(dir / "map") + " --truth " + q(truth / "gt_edge"),
                         dir);
  REQUIRE(fit.code == 0);
  CHECK(fs::exists(dir / "map.png"));
  const auto stats = read_json(dir / "map_stats.json");
  CHECK(stats["correlation"].get<double>() > 0.999999);
  CHECK(stats["invalid_pixels"] == 0);
  CHECK(stats["mode"] == "edge");
  const ChemicalMap map = load_map(dir / "map"), gt = load_map(truth / "gt_edge");
  for (std::size_t i = 0; i < map.values.size(); ++i) CHECK(std::abs(map.values[i] - gt.values[i]) <= 1e-2);

  REQUIRE(txmsum("fit " + q(dir / "p_clean") + " " + q(truth / "library.csv") + " " + q(truth / "states.json") + " " +
                     q(dir / "phase") + " --mode phase --truth " + q(truth / "gt_state"),
                 dir)
              .code == 0);
  CHECK(read_json(dir / "phase_stats.json")["correlation"].get<double>() > 0.999999);

  const Run m = txmsum("metrics --map " + q(dir / "map") + " --truth-map " + q(truth / "gt_edge"), dir);
  REQUIRE(m.code == 0);
  CHECK(nlohmann::json::parse(m.out)["correlation"].get<double>() > 0.999999);

  const Run reg = txmsum("register " + q(dir / "p") + " " + q(dir / "r") + " --truth " + q(truth / "shifts.csv"), dir);
  REQUIRE(reg.code == 0);
  CHECK(fs::exists(dir / "r_shifts.csv"));
  CHECK(reg.out.find("shift_recovery 1") != std::string::npos);
  REQUIRE(txmsum("register " + q(dir / "p") + " " + q(dir / "r2") + " --subpixel --shifts " + q(dir / "sub.csv"), dir).code == 0);
  CHECK(fs::exists(dir / "sub.csv"));

  CHECK(txmsum("fit " + q(dir / "p_clean") + " " + q(truth / "library.csv") + " " + q(truth / "states.json") + " " + q(dir / "w") +
                   " --windows 1,2",
               dir)
            .code == 1);
}

TEST_CASE("sweep and library subcommands")
{
  testing::TempDir dir;
  std::ofstream(dir / "sweep.json") << R"({"phantom": {"width": 24, "height": 24, "frames": 20},
    "sigmas": [10, 150], "methods": ["noisy", "svd"], "denoiser": "wavelet:2"})";
  REQUIRE(txmsum("sweep " + q(dir / "sweep.json") + " " + q(dir / "out.csv") + " --sure-curves " + q(dir / "curves.json"), dir).code == 0);
  std::ifstream in(dir / "out.csv");
  std::size_t lines = 0;
  for (std::string line; std::getline(in, line);) ++lines;
  CHECK(lines == 1 + 4);
  CHECK(read_json(dir / "curves.json").size() == 2);

  REQUIRE(txmsum("library " + q(dir / "lib.csv") + " " + q(dir / "states.json") + " --frames 50", dir).code == 0);
  const SpectrumLibrary lib = SpectrumLibrary::load(dir / "lib.csv", dir / "states.json");
  CHECK(lib.size() == 5);
  CHECK(lib.energies().size() == 50);
}

TEST_CASE("streaming denoising of a 256 MB stack stays under a memory cap")
{
  testing::TempDir dir;
  const std::size_t W = 512, H = 512, T = 256;
  {
    // Rank-3 content plus noise, written one frame at a time.
    StackHeader header;
    header.width = W;
    header.height = H;
    header.frames = T;
    FrameWriter writer(header, dir / "big");
    std::vector<float> frame(W * H);
    for (std::size_t t = 0; t < T; ++t) {
      Rng rng(derive_seed(5, t));
      const double a = std::sin(0.05 * static_cast<double>(t)), b = static_cast<double>(t) / T;
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
          frame[y * W + x] = static_cast<float>(100.0 + 40.0 * a * ((x / 64 + y / 64) % 2) + 60.0 * b * (x > y) + 10.0 * rng.normal());
      writer.write(frame);
    }
    writer.close();
  }
  const std::string bin = TXMSUM_BIN, in = (dir / "big").string(), out = (dir / "big_out").string();
  const pid_t pid = fork();
  REQUIRE(pid >= 0);
  if (pid == 0) {
    ::setenv("OMP_NUM_THREADS", "1", 1);
    if (const int devnull = ::open("/dev/null", O_WRONLY); devnull >= 0) ::dup2(devnull, STDOUT_FILENO);
    execl(bin.c_str(), bin.c_str(), "denoise", in.c_str(), out.c_str(), "--streaming", "--factorization", "rsvd:8,4,1,7", "--denoiser",
          "wavelet:3", "--sigma", "10", static_cast<char*>(nullptr));
    _exit(127);
  }
  int status = 0;
  rusage usage{};
  REQUIRE(wait4(pid, &status, 0, &usage) == pid);
  REQUIRE(WIFEXITED(status));
  CHECK(WEXITSTATUS(status) == 0);
  const double peak_mb = static_cast<double>(usage.ru_maxrss) / 1024.0;
  MESSAGE("streaming peak RSS " << peak_mb << " MB for a 256 MB payload");
  CHECK(peak_mb < 160.0);
  CHECK(read_header(dir / "big_out").frames == T);
  CHECK(fs::file_size(dir / "big_out.f32") == W * H * T * sizeof(float));
}
