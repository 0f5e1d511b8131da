#include <doctest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "tck/codec.hpp"
#include "tck/rng.hpp"
#include "tck/serialize.hpp"

namespace fs = std::filesystem;
using namespace tck;

namespace {

struct Run {
  int code = -1;
  std::string out;  // stdout and stderr together
};

Run tck_run(const std::string& args) {
  const std::string cmd = std::string(TCK_CLI_PATH) + " " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = std::fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path root() {
  static const fs::path r = [] {
    const fs::path p = fs::temp_directory_path() / "tck_cli_test";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

fs::path config(const std::string& name, const fs::path& work, const std::string& extra = "") {
  const fs::path p = root() / name;
  std::ofstream f(p);
  f << "work = " << work.string() << "\n"
    << "[world]\nsize = 16\ntrain = 24\nval = 8\ntest = 8\n"
    << "[net]\nbase_channels = 4\nfeature_channels = 4\n"
    << "[pretrain]\nsteps = 2\nbatch = 4\n"
    << "[codec]\nport_channels = 3\nperipheral_depth = 1\nlatent_channels = 6\nanalysis_downs = 1\n"
    << "codebook_m = 4\ncodebook_n = 3\ncodebook_tau = 3\ncodebook_extent = 4\ncoeff_hidden = 6\n"
    << "predictor_width = 5\nhyper_downs = 0\n"
    << "[train]\ntasks = scene\nsteps = 4\nbatch = 4\neval_every = 2\n"
    << extra;
  return p;
}

// Work dir with data and all six nets, built once.
fs::path ready_work() {
  static const fs::path w = [] {
    const fs::path work = root() / "ready";
    const fs::path cfg = config("ready.ini", work);
    REQUIRE(tck_run("dataset --config " + cfg.string()).code == 0);
    const Run r = tck_run("pretrain --config " + cfg.string());
    INFO(r.out);
    REQUIRE(r.code == 0);
    return work;
  }();
  return w;
}

std::string last_line(const std::string& s) {
  std::string t = s;
  while (!t.empty() && t.back() == '\n') t.pop_back();
  const auto pos = t.rfind('\n');
  return pos == std::string::npos ? t : t.substr(pos + 1);
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_CASE("dataset rerun, reseed and corruption") {
  const fs::path work = root() / "ds";
  const fs::path cfg = config("ds.ini", work);
  Run r = tck_run("dataset --config " + cfg.string());
  INFO(r.out);
  REQUIRE(r.code == 0);
  CHECK(r.out.find("generated") != std::string::npos);
  const std::string m0 = slurp(work / "data" / "manifest.json");

  r = tck_run("dataset --config " + cfg.string());
  CHECK(r.code == 0);
  CHECK(r.out.find("train: cache valid, skipped") != std::string::npos);
  CHECK(slurp(work / "data" / "manifest.json") == m0);

  r = tck_run("dataset --config " + cfg.string() + " --seed 99");
  CHECK(r.code == 0);
  CHECK(r.out.find("regenerated") != std::string::npos);
  CHECK(slurp(work / "data" / "manifest.json") != m0);

  {
    std::fstream f(work / "data" / "val.tckd", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(60);
    f.write("\xff\xff\xff\xff", 4);
  }
  r = tck_run("dataset --config " + cfg.string() + " --seed 99");
  CHECK(r.code == 0);
  CHECK(r.out.find("warning") != std::string::npos);
  CHECK(r.out.find("val: regenerated") != std::string::npos);
  CHECK(r.out.find("train: cache valid, skipped") != std::string::npos);
}

TEST_CASE("config errors exit 2") {
  const fs::path work = root() / "cfgerr";
  CHECK(tck_run("dataset --config " + config("bad.ini", work, "[codec]\nbogus = 1\n").string()).code == 2);
  CHECK(tck_run("dataset --config " + config("ok.ini", work).string() + " --set world.nope=3").code == 2);
  CHECK(tck_run("dataset --config " + config("ok.ini", work).string() + " --set world.size").code == 2);
  CHECK(tck_run("dataset --config " + (root() / "absent.ini").string()).code == 2);
  CHECK(tck_run("frobnicate").code == 2);
}

TEST_CASE("missing prerequisites name the producing command") {
  const fs::path work = root() / "prereq";
  const fs::path cfg = config("prereq.ini", work);
  Run r = tck_run("train --config " + cfg.string());
  CHECK(r.code == 3);
  CHECK(r.out.find("tck dataset") != std::string::npos);
  REQUIRE(tck_run("dataset --config " + cfg.string()).code == 0);
  r = tck_run("train --config " + cfg.string());
  CHECK(r.code == 3);
  CHECK(r.out.find("tck pretrain") != std::string::npos);
  CHECK_FALSE(fs::exists(work / "runs"));
}

TEST_CASE("identical config gives identical run directories") {
  const fs::path work = ready_work();
  const fs::path cfg = config("train.ini", work);
  const Run a = tck_run("train --config " + cfg.string() + " --out " + (root() / "runs_a").string());
  const Run b = tck_run("train --config " + cfg.string() + " --out " + (root() / "runs_b").string());
  INFO(a.out);
  REQUIRE(a.code == 0);
  REQUIRE(b.code == 0);
  std::vector<fs::path> da, db;
  for (const auto& e : fs::directory_iterator(root() / "runs_a")) da.push_back(e.path());
  for (const auto& e : fs::directory_iterator(root() / "runs_b")) db.push_back(e.path());
  REQUIRE(da.size() == 1);
  REQUIRE(db.size() == 1);
  CHECK(da[0].filename() == db[0].filename());
  int files = 0;
  for (const auto& e : fs::directory_iterator(da[0])) {
    ++files;
    CHECK_MESSAGE(slurp(e.path()) == slurp(db[0] / e.path().filename()), e.path().filename().string());
  }
  CHECK(files == 4);
  CHECK_FALSE(fs::exists(da[0] / ".lock"));
  const std::string manifest = slurp(da[0] / "manifest.json");
  CHECK(manifest.find("train.lambda = 1") != std::string::npos);
  CHECK(manifest.find("digest") != std::string::npos);

  const Run again = tck_run("train --config " + cfg.string() + " --out " + (root() / "runs_a").string());
  CHECK(again.code == 0);
  CHECK(again.out.find("cache valid, skipped") != std::string::npos);
}

TEST_CASE("sweep plan writes one row per lambda") {
  const fs::path work = ready_work();
  const fs::path cfg =
      config("sweep.ini", work, "[plan]\nkind = rd_sweep\ngroups = scene\nlambda_grid = 0.5,2,8\n");
  const Run r = tck_run("plan --config " + cfg.string() + " --out " + (root() / "plans").string());
  INFO(r.out);
  REQUIRE(r.code == 0);
  const fs::path dir = last_line(r.out);
  const auto rows = lines(slurp(dir / "rd_sweep_scene.csv"));
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].rfind("lambda,val_bpp,test_bpp", 0) == 0);
  CHECK(rows[1].rfind("0.5,", 0) == 0);
  CHECK(rows[2].rfind("2,", 0) == 0);
  CHECK(rows[3].rfind("8,", 0) == 0);
  CHECK(fs::exists(dir / "manifest.json"));

  const Run bad = tck_run("plan --config " + cfg.string() + " --set plan.kind=grouping");
  CHECK(bad.code == 2);
}

TEST_CASE("encode and decode feature files") {
  const fs::path work = ready_work();
  const fs::path cfg = config("train.ini", work);
  const Run t = tck_run("train --config " + cfg.string() + " --out " + (root() / "runs_c").string());
  REQUIRE(t.code == 0);
  const fs::path run_dir = lines(t.out)[0];
  const fs::path model = run_dir / "codec.tckm";
  AggregateCodec codec = AggregateCodec::load(model);
  const PortSpec ps = codec.ports()[0].spec;
  Rng rng(5);
  Tensor f({ps.channels, ps.height, ps.width});
  for (std::size_t i = 0; i < f.numel(); ++i) f[i] = rng.uniform(0.0, 2.0);
  const fs::path feat = root() / "fixture.tckf";
  write_feature_file(feat, FeatureFile{{ps.task_id}, {f}, 16, 16});

  const fs::path stream = root() / "fixture.tcks", recon = root() / "recon.tckf", dec = root() / "decoded.tckf";
  const Run e = tck_run("encode --model " + model.string() + " --input " + feat.string() + " --out " + stream.string() +
                        " --recon " + recon.string());
  INFO(e.out);
  REQUIRE(e.code == 0);
  const ContainerStream cs = ContainerStream::parse(read_file(stream));
  CHECK(std::stod(last_line(e.out)) == doctest::Approx(cs.payload_bits() / 256.0).epsilon(1e-8));

  const Run d = tck_run("decode --model " + model.string() + " --input " + stream.string() + " --out " + dec.string());
  REQUIRE(d.code == 0);
  CHECK(slurp(dec) == slurp(recon));

  CodecConfig other = codec.config();
  other.seed += 1;
  AggregateCodec wrong({ps}, other);
  const fs::path wrong_model = root() / "wrong.tckm";
  wrong.save(wrong_model);
  const fs::path dec2 = root() / "decoded_wrong.tckf";
  const Run w = tck_run("decode --model " + wrong_model.string() + " --input " + stream.string() + " --out " +
                        dec2.string());
  CHECK(w.code == 4);
  CHECK(w.out.find("digest") != std::string::npos);
  CHECK_FALSE(fs::exists(dec2));

  std::string bytes = slurp(stream);
  bytes.resize(bytes.size() / 2);
  std::ofstream(root() / "short.tcks", std::ios::binary) << bytes;
  CHECK(tck_run("decode --model " + model.string() + " --input " + (root() / "short.tcks").string() + " --out " +
                (root() / "short.tckf").string())
            .code == 4);
  CHECK(tck_run("decode --model " + (root() / "none.tckm").string() + " --input " + stream.string() + " --out " +
                dec2.string())
            .code == 3);
}

TEST_CASE("report on runs") {
  const fs::path work = ready_work();
  const fs::path cfg = config("train.ini", work);
  const Run t = tck_run("train --config " + cfg.string() + " --out " + (root() / "runs_r").string());
  REQUIRE(t.code == 0);
  const fs::path run_dir = lines(t.out)[0];
  const fs::path out = root() / "report";
  const Run r = tck_run("report " + run_dir.string() + " --out " + out.string());
  INFO(r.out);
  REQUIRE(r.code == 0);
  CHECK(lines(slurp(out / "scene.csv")).size() == 2);
  const std::string svg = slurp(out / "scene.svg");
  CHECK(svg.rfind("<svg", 0) == 0);

  fs::create_directories(root() / "empty_runs");
  CHECK(tck_run("report " + (root() / "empty_runs").string() + " --out " + (root() / "r2").string()).code != 0);
  CHECK(tck_run("report --out " + (root() / "r3").string()).code != 0);
}
