// tools/asrkit.cpp
//
// Copyright 2026 The asrkit Authors
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
//
// Command-line front end for the pipeline.  One subcommand per stage; all
// stages are idempotent, so rerunning a finished stage is a cheap no-op.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "asrkit/pipeline.hpp"

namespace fs = std::filesystem;
using namespace asrkit;

namespace {

constexpr const char* kUsage = R"(usage: asrkit [flags] <command> [args] [key=value ...]

commands
  synth <dir>              generate a synthetic corpus into <dir>
  prep <dir>               validate a data dir (wav.scp/text/utt2spk/spk2utt)
  feats <dir>              extract MFCC + fbank archives and per-speaker CMVN
  lm <dir>                 estimate the word n-gram LM from <dir>/text
  train-gmm <dir>          run the monophone -> triphone GMM ladder
  train-chain <dir>        train the chain TDNN on triphone alignments
  mkgraph <stage>          compile the HCLG decoding graph (mono|tri|chain)
  decode <stage> <dir>     decode a prepped test dir with the given stage
  score <stage> <dir>      score decode output against <dir>/text
  score-files <hyp> <ref>  score arbitrary hypothesis/reference files
  config                   print the effective configuration and exit

flags
  --work-dir <path>        artifact directory (default: work)
  --config <file>          key=value config file, '#' comments
  --seed <n>               master random seed (default: 0)
  --jobs <n>               worker threads (default: all processors)
  --tag <name>             corpus tag for synth (default: dir basename)

Trailing key=value tokens override config-file settings; run `asrkit config`
to list every key with its default.

exit codes: 0 ok, 1 invalid config or data, 2 missing artifact, 3 internal
)";

struct Cli {
  fs::path work_dir = "work";
  std::optional<fs::path> config_file;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::optional<std::string> tag;
  std::string command;
  std::vector<std::string> args;
  std::map<std::string, std::string> overrides;
};

Cli parse_cli(int argc, char** argv) {
  Cli c;
  auto need = [&](int& i, const char* flag) -> std::string {
    if (i + 1 >= argc)
      throw BadConfig(std::string(flag) + " requires a value");
    return argv[++i];
  };
  for (int i = 1; i < argc; ++i) {
    std::string a = argv[i];
    if (a == "--help" || a == "-h") {
      std::cout << kUsage;
      std::exit(0);
    } else if (a == "--work-dir") {
      c.work_dir = need(i, "--work-dir");
    } else if (a == "--config") {
      c.config_file = need(i, "--config");
    } else if (a == "--seed") {
      c.seed = detail::cfg_u64("--seed", need(i, "--seed"));
    } else if (a == "--jobs") {
      c.jobs = detail::cfg_int("--jobs", need(i, "--jobs"));
    } else if (a == "--tag") {
      c.tag = need(i, "--tag");
    } else if (a.rfind("--", 0) == 0) {
      throw BadConfig("unknown flag " + a);
    } else if (!c.command.empty() && a.find('=') != std::string::npos) {
      auto eq = a.find('=');
      c.overrides[a.substr(0, eq)] = a.substr(eq + 1);
    } else if (c.command.empty()) {
      c.command = a;
    } else {
      c.args.push_back(a);
    }
  }
  return c;
}

const std::string& arg(const Cli& c, std::size_t i, const char* what) {
  if (i >= c.args.size())
    throw BadConfig(c.command + ": missing " + what + " argument");
  return c.args[i];
}

int run(const Cli& cli) {
  PipelineConfig cfg;
  cfg.jobs = default_jobs();
  if (cli.config_file) apply_config(&cfg, read_config_file(*cli.config_file));
  apply_config(&cfg, cli.overrides);
  if (cli.seed) cfg.seed = *cli.seed;
  if (cli.jobs) cfg.jobs = *cli.jobs;

  if (cli.command == "config") {
    std::cout << dump_config(cfg);
    return 0;
  }
  if (cli.command == "score-files") {
    ScoreReport rep =
        score_files(arg(cli, 0, "hypothesis file"), arg(cli, 1, "reference file"));
    write_score_report_text(rep, std::cout);
    return 0;
  }

  Pipeline p(cli.work_dir, cfg);
  if (cli.command == "synth") {
    fs::path dir = arg(cli, 0, "output dir");
    std::string tag = cli.tag ? *cli.tag : dir.filename().string();
    DataDir d = p.synth_data(tag, dir);
    std::cout << "synthesized " << d.wav.size() << " utterances ("
              << d.spk2utt.size() << " speakers) in " << dir.string() << "\n";
  } else if (cli.command == "prep") {
    DataDir d = p.prep(arg(cli, 0, "data dir"));
    std::cout << "ok: " << d.wav.size() << " utterances, " << d.spk2utt.size()
              << " speakers\n";
  } else if (cli.command == "feats") {
    p.feats(load_data_dir(arg(cli, 0, "data dir")));
  } else if (cli.command == "lm") {
    p.lm(load_data_dir(arg(cli, 0, "data dir")));
  } else if (cli.command == "train-gmm") {
    p.train_gmm(load_data_dir(arg(cli, 0, "data dir")));
  } else if (cli.command == "train-chain") {
    p.train_chain_stage(load_data_dir(arg(cli, 0, "data dir")));
  } else if (cli.command == "mkgraph") {
    p.mkgraph(arg(cli, 0, "stage"));
  } else if (cli.command == "decode") {
    p.decode(arg(cli, 0, "stage"), load_data_dir(arg(cli, 1, "test dir")));
  } else if (cli.command == "score") {
    ScoreReport rep =
        p.score(arg(cli, 0, "stage"), load_data_dir(arg(cli, 1, "test dir")));
    write_score_report_text(rep, std::cout);
  } else if (cli.command.empty()) {
    std::cerr << kUsage;
    return 1;
  } else {
    throw BadConfig("unknown command '" + cli.command + "'");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(parse_cli(argc, argv));
  } catch (const MissingArtifact& e) {
    std::cerr << "asrkit: missing artifact: " << e.what() << "\n";
    return 2;
  } catch (const ValidationFailed& e) {
    std::cerr << "asrkit: validation failed: " << e.what() << "\n";
    return 1;
  } catch (const BadConfig& e) {
    std::cerr << "asrkit: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "asrkit: internal error: " << e.what() << "\n";
    return 3;
  }
}
