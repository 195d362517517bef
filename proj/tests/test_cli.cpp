#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "test_util.hpp"

namespace fs = std::filesystem;

namespace {

struct CmdResult {
  int code = -1;
  std::string out, err;
};

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// Runs the installed binary through the shell; MCRCNN_BIN is injected by the
// build. `env_prefix` allows per-invocation environment overrides.
CmdResult run_cmd(const std::string& args, const testutil::TempDir& dir,
                  const std::string& env_prefix = "") {
  const std::string out_path = (dir.path() / "cmd-stdout.txt").string();
  const std::string err_path = (dir.path() / "cmd-stderr.txt").string();
  const std::string cmd =
      env_prefix + MCRCNN_BIN " " + args + " >" + out_path + " 2>" + err_path;
  const int status = std::system(cmd.c_str());
  CmdResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out_path);
  r.err = slurp(err_path);
  return r;
}

bool contains(const std::string& hay, const std::string& needle) {
  return hay.find(needle) != std::string::npos;
}

}  // namespace

TEST_CASE("help text lists subcommands and exit codes") {
  testutil::TempDir dir;
  auto r = run_cmd("--help", dir);
  CHECK(r.code == 0);
  for (const char* sub : {"synth", "make-background", "train-bcnn", "train-scnn", "infer",
                          "evaluate", "param-count", "gradcheck"}) {
    CHECK(contains(r.out, sub));
  }
  CHECK(contains(r.out, "Exit codes"));
  CHECK(contains(r.out, "6  gradient check"));

  auto sub_help = run_cmd("train-bcnn --help", dir);
  CHECK(sub_help.code == 0);
  CHECK(contains(sub_help.out, "--width"));
  CHECK(contains(sub_help.out, "--plateau-patience"));
}

TEST_CASE("error conditions map to distinct exit codes") {
  testutil::TempDir dir;
  CHECK(run_cmd("bogus-subcommand", dir).code == 2);
  CHECK(run_cmd("param-count --no-such-flag", dir).code == 2);

  auto bad_cfg = run_cmd("param-count --width 0", dir);
  CHECK(bad_cfg.code == 3);
  CHECK(contains(bad_cfg.err, "error: config:"));
  CHECK(bad_cfg.err.find('\n') == bad_cfg.err.size() - 1);  // one line

  auto missing = run_cmd("make-background --video /does/not/exist --out x.png", dir);
  CHECK(missing.code == 4);
  CHECK(contains(missing.err, "error: io:"));

  CHECK(run_cmd("evaluate --probs p --video a --dataset b", dir).code == 3);
  CHECK(run_cmd("gradcheck --tolerance -1", dir).code == 3);
}

TEST_CASE("param-count prints the expected grand total") {
  testutil::TempDir dir;
  auto r = run_cmd("param-count --config default", dir);
  CHECK(r.code == 0);
  CHECK(contains(r.out, "bcnn subtotal"));
  CHECK(contains(r.out, "558083"));
  CHECK(contains(r.out, "929"));
  CHECK(contains(r.out, "519882"));
  CHECK(contains(r.out, "1078894"));
}

TEST_CASE("config files merge under explicit flags") {
  testutil::TempDir dir;
  const std::string cfg = (dir.path() / "model.cfg").string();
  {
    std::ofstream out(cfg);
    out << "# comment line\n"
        << "[model]\n"
        << "width = 8\n"
        << "bcnn_deep = 4\n";
  }
  auto from_file = run_cmd("param-count --config " + cfg, dir);
  auto from_flags = run_cmd("param-count --width 8 --bcnn-deep 4", dir);
  CHECK(from_file.code == 0);
  CHECK(from_file.out == from_flags.out);

  // A flag given on the command line beats the same key in the file.
  auto overridden = run_cmd("param-count --config " + cfg + " --width 12", dir);
  auto direct = run_cmd("param-count --width 12 --bcnn-deep 4", dir);
  CHECK(overridden.code == 0);
  CHECK(overridden.out == direct.out);

  {
    std::ofstream out(cfg);
    out << "no_such_key = 1\n";
  }
  auto unknown = run_cmd("param-count --config " + cfg, dir);
  CHECK(unknown.code == 3);
  CHECK(contains(unknown.err, "unknown config key"));

  {
    std::ofstream out(cfg);
    out << "garbage-without-equals\n";
  }
  auto malformed = run_cmd("param-count --config " + cfg, dir);
  CHECK(malformed.code == 3);

  CHECK(run_cmd("param-count --config " + (dir.path() / "absent.cfg").string(), dir).code == 4);
}

TEST_CASE("threads come from the environment when no flag is given") {
  testutil::TempDir dir;
  CHECK(run_cmd("param-count", dir, "MCRCNN_THREADS=2 ").code == 0);
  auto bad = run_cmd("param-count", dir, "MCRCNN_THREADS=abc ");
  CHECK(bad.code == 3);
  CHECK(contains(bad.err, "MCRCNN_THREADS"));
}

TEST_CASE("gradcheck reports its maximum relative error") {
  testutil::TempDir dir;
  auto r = run_cmd("gradcheck --seed 7", dir);
  CHECK(r.code == 0);
  CHECK(contains(r.out, "max rel err"));
  CHECK(contains(r.out, "gradient check passed"));

  // An absurdly tight tolerance must flip the exit code to the dedicated one.
  auto tight = run_cmd("gradcheck --seed 7 --tolerance 1e-18", dir);
  CHECK(tight.code == 6);
  CHECK(contains(tight.out, "max rel err"));
  CHECK(contains(tight.err, "error: check:"));
}

TEST_CASE("the full pipeline runs end to end at toy scale") {
  testutil::TempDir dir;
  const std::string video = (dir.path() / "data" / "toy" / "vid").string();
  const std::string bg = (dir.path() / "bg.png").string();
  const std::string run1 = (dir.path() / "run1").string();
  const std::string run2 = (dir.path() / "run2").string();
  const std::string probs = (dir.path() / "probs").string();
  const std::string csv = (dir.path() / "report.csv").string();

  auto synth = run_cmd("synth --out " + video +
                           " --width 32 --height 32 --frames 8 --object-size 8 --start-x 2 "
                           "--start-y 12 --dx 2 --seed 4",
                       dir);
  CHECK(synth.code == 0);
  CHECK(fs::is_regular_file(fs::path(video) / "input" / "in000001.png"));
  CHECK(fs::is_regular_file(fs::path(video) / "groundtruth" / "gt000008.png"));
  CHECK(fs::is_regular_file(fs::path(video) / "temporalROI.txt"));
  CHECK(fs::is_regular_file(fs::path(video) / "synth-config.cfg"));

  CHECK(run_cmd("make-background --video " + video + " --out " + bg, dir).code == 0);
  CHECK(run_cmd("make-background --video " + video + " --out " + bg + " --frames 99", dir)
            .code == 3);

  const std::string model_flags =
      " --width 4 --bcnn-deep 2 --scnn-deep 2 --rpm-dilations 2,4 --rpm-width 2";
  auto p1 = run_cmd("train-bcnn --video " + video + " --background " + bg + " --run-dir " +
                        run1 + model_flags +
                        " --epochs 2 --updates 4 --batch 4 --patch 16 --seed 4",
                    dir);
  INFO(p1.err);
  CHECK(p1.code == 0);
  CHECK(contains(p1.out, "best checkpoint"));
  CHECK(fs::is_regular_file(fs::path(run1) / "resolved-config.cfg"));
  CHECK(fs::is_regular_file(fs::path(run1) / "seed.txt"));
  CHECK(fs::is_regular_file(fs::path(run1) / "run-log.csv"));
  CHECK(fs::is_regular_file(fs::path(run1) / "best.ckpt"));
  const std::string resolved = slurp((fs::path(run1) / "resolved-config.cfg").string());
  CHECK(contains(resolved, "[model]"));
  CHECK(contains(resolved, "width = 4"));
  CHECK(contains(resolved, "seed = 4"));
  CHECK(slurp((fs::path(run1) / "seed.txt").string()) == "4\n");

  auto p2 = run_cmd("train-scnn --video " + video + " --init " + run1 + "/best.ckpt" +
                        " --run-dir " + run2 + " --epochs 2 --updates 4 --seed 4",
                    dir);
  INFO(p2.err);
  CHECK(p2.code == 0);
  CHECK(fs::is_regular_file(fs::path(run2) / "best.ckpt"));
  CHECK(fs::is_regular_file(fs::path(run2) / "val_frames.txt"));

  auto inf = run_cmd("infer --video " + video + " --checkpoint " + run2 + "/best.ckpt" +
                         " --out " + probs + " --threshold 0.7",
                     dir);
  INFO(inf.err);
  CHECK(inf.code == 0);
  CHECK(fs::is_regular_file(fs::path(probs) / "prob000001.png"));
  CHECK(fs::is_regular_file(fs::path(probs) / "bin000008.png"));

  CHECK(run_cmd("infer --video " + video + " --checkpoint " + run2 + "/best.ckpt --out " +
                    probs + " --threshold 1.5",
                dir)
            .code == 3);

  auto ev = run_cmd("evaluate --video " + video + " --probs " + probs +
                        " --threshold 0.7 --frames-file " + run2 + "/val_frames.txt --out " +
                        csv,
                    dir);
  INFO(ev.err);
  CHECK(ev.code == 0);
  CHECK(contains(ev.out, "overall"));
  const std::string report = slurp(csv);
  CHECK(contains(report, "category,video,frames,TP,TN,FP,FN"));
  CHECK(contains(report, "toy,vid,"));

  // Per-category default thresholds apply when no explicit threshold is given.
  auto ev_default = run_cmd("evaluate --video " + video + " --probs " + probs, dir);
  CHECK(ev_default.code == 0);
  CHECK(contains(ev_default.out, "thr 0.70"));
}
