#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "condvc/bitstream.hpp"
#include "condvc/entropy_lab.hpp"
#include "condvc/eval.hpp"
#include "condvc/training.hpp"

namespace condvc::cli {

enum ExitCode { kOk = 0, kValidation = 1, kRuntime = 2 };

// Bad user input: unknown keys, malformed values, missing files named by the user.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kOutputRootEnv = "CONDVC_OUTPUT_ROOT";

using KeyValues = std::map<std::string, std::string>;

// Keys each subcommand accepts, with defaults. Training keys come from
// TrainConfig so that checkpoints and CLI share one vocabulary.
inline KeyValues defaults_for(const std::string& cmd) {
  KeyValues kv{{"seed", "0"}, {"jobs", "1"}};
  auto add = [&](KeyValues more) { kv.insert(more.begin(), more.end()); };
  if (cmd == "train") {
    add(to_key_values(TrainConfig{}));
    add({{"init_from", ""}});
  } else if (cmd == "encode") {
    add({{"checkpoint", ""}, {"input", ""}, {"synth", ""}, {"synth_width", "64"}, {"synth_height", "64"},
         {"synth_frames", "96"}, {"gop", "32"}, {"frames", "96"}});
  } else if (cmd == "verify") {
    add({{"dir", ""}, {"checkpoint", ""}});
  } else if (cmd == "eval") {
    add({{"checkpoints", ""}, {"inputs", ""}, {"heldout", "0"}, {"synth_width", "64"}, {"synth_height", "64"},
         {"synth_frames", "96"}, {"gop", "32"}, {"frames", "96"}, {"dataset", "synthetic"}});
  } else if (cmd == "entropy-lab") {
    const lab::LabConfig d;
    add({{"trials", std::to_string(d.trials)}, {"max_alphabet", std::to_string(d.max_alphabet)},
         {"predictors_per_trial", std::to_string(d.predictors_per_trial)},
         {"multi_instances", std::to_string(d.multi_instances)}, {"multi_max_alphabet", std::to_string(d.multi_max_alphabet)},
         {"multi_codomain", std::to_string(d.multi_codomain)}});
    kv["seed"] = std::to_string(d.seed);
  } else if (cmd == "report") {
    add({{"dir", ""}});
  }
  return kv;
}

struct CommandConfig {
  std::string command;
  KeyValues values;
  std::filesystem::path out;

  const std::string& get(const std::string& k) const { return values.at(k); }
  long long integer(const std::string& k) const {
    try {
      std::size_t pos = 0;
      const long long v = std::stoll(get(k), &pos);
      if (pos != get(k).size()) throw std::invalid_argument(k);
      return v;
    } catch (const std::exception&) {
      throw ValidationError("key " + k + " expects an integer, got '" + get(k) + "'");
    }
  }
  std::uint64_t seed() const {
    const long long s = integer("seed");
    if (s < 0) throw ValidationError("seed must be non-negative");
    return static_cast<std::uint64_t>(s);
  }

  std::string snapshot() const {
    std::string s = "command=" + command + "\n";
    for (const auto& [k, v] : values) s += k + "=" + v + "\n";
    return s;
  }
};

// Merges defaults, config file, --set overrides and explicit flags, in that
// order of precedence. Unknown keys are rejected.
inline CommandConfig resolve(const std::string& cmd, const std::string& config_path,
                             const std::vector<std::string>& sets, const KeyValues& flags, const std::string& out) {
  CommandConfig c;
  c.command = cmd;
  c.values = defaults_for(cmd);
  auto apply = [&](const KeyValues& kv, const std::string& origin) {
    for (const auto& [k, v] : kv) {
      if (k == "command") {
        if (v != cmd) throw ValidationError(origin + ": config is for command '" + v + "', not '" + cmd + "'");
        continue;
      }
      if (!c.values.count(k)) throw ValidationError(origin + ": unknown key '" + k + "' for " + cmd);
      c.values[k] = v;
    }
  };
  if (!config_path.empty()) {
    std::ifstream is(config_path);
    if (!is) throw ValidationError("cannot open config file " + config_path);
    try {
      apply(parse_key_values(is, config_path), config_path);
    } catch (const VideoError& e) {
      throw ValidationError(e.what());
    }
  }
  KeyValues overrides;
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ValidationError("--set expects key=value, got '" + s + "'");
    overrides[s.substr(0, eq)] = s.substr(eq + 1);
  }
  apply(overrides, "--set");
  apply(flags, "flag");
  if (!out.empty()) {
    c.out = out;
  } else {
    const char* root = std::getenv(kOutputRootEnv);
    c.out = std::filesystem::path(root && *root ? root : "runs") / cmd;
  }
  if (c.integer("jobs") < 1) throw ValidationError("jobs must be >= 1");
  return c;
}

inline void write_snapshot(const CommandConfig& c) {
  std::filesystem::create_directories(c.out);
  std::ofstream(c.out / "config.txt") << c.snapshot();
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  for (std::string item; std::getline(is, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

inline TrainConfig train_config_from(const CommandConfig& c) {
  TrainConfig t;
  KeyValues kv = c.values;
  kv.erase("init_from");
  kv.erase("jobs");
  try {
    const auto unknown = apply_key_values(t, kv);
    if (!unknown.empty()) throw ValidationError("unknown training key " + unknown.front());
    t.validate();
  } catch (const std::invalid_argument& e) {
    throw ValidationError(e.what());
  }
  return t;
}

inline Checkpoint load_checkpoint_checked(const std::string& path) {
  if (path.empty()) throw ValidationError("a checkpoint path is required");
  if (!std::filesystem::exists(path)) throw ValidationError("checkpoint not found: " + path);
  return load_checkpoint(path);
}

// Sequence from a descriptor file, a directory of im*.png frames, or a
// synthetic generator.
inline SequenceSource load_input(const CommandConfig& c, const std::string& input, const std::string& synth,
                                 std::uint64_t seed) {
  if (!input.empty()) {
    if (!std::filesystem::exists(input)) throw ValidationError("input not found: " + input);
    if (std::filesystem::is_directory(input)) return load_clip_directory(input);
    return load_sequence(std::filesystem::path(input));
  }
  if (synth.empty()) throw ValidationError("either input or synth must be given");
  SynthSpec s;
  s.generator = synth;
  s.width = static_cast<int>(c.integer("synth_width"));
  s.height = static_cast<int>(c.integer("synth_height"));
  s.frames = static_cast<int>(c.integer("synth_frames"));
  s.seed = seed;
  try {
    return synth_sequence(s);
  } catch (const VideoError& e) {
    throw ValidationError(e.what());
  }
}

inline GopConfig gop_from(const CommandConfig& c) {
  GopConfig g{static_cast<int>(c.integer("gop")), static_cast<int>(c.integer("frames"))};
  try {
    g.validate();
  } catch (const std::exception& e) {
    throw ValidationError(e.what());
  }
  return g;
}

// ---------------------------------------------------------------------------
// Subcommands

inline int cmd_train(const CommandConfig& c, std::ostream& log) {
  TrainConfig cfg = train_config_from(c);
  std::unique_ptr<Codec<float>> codec;
  const std::string init = c.get("init_from");
  if (!init.empty()) {
    const auto ck = load_checkpoint_checked(init);
    codec = codec_from_checkpoint<float>(ck);
    cfg.codec = codec->config();  // architecture comes from the base model
    cfg.stage0_steps = 0;  // coders are already pretrained
    log << "initialised from " << init << "\n";
  } else {
    codec = make_codec<float>(cfg);
  }
  write_snapshot(c);
  Trainer<float> trainer(*codec, cfg);
  std::ofstream telemetry(c.out / "telemetry.csv");
  telemetry << "step,stage,loss,bpp,psnr\n" << std::setprecision(9);
  trainer.on_step = [&](const TelemetryRow& r) {
    telemetry << r.step << "," << r.stage << "," << r.loss << "," << r.bpp << "," << r.psnr << "\n";
  };
  trainer.train_two_stage();
  {
    std::ofstream ep(c.out / "epochs.csv");
    ep << "stage,epoch,last_step,loss,bpp,psnr\n" << std::setprecision(9);
    for (const auto& r : epoch_means(trainer.telemetry))
      ep << r.stage << "," << r.epoch << "," << r.step << "," << r.loss << "," << r.bpp << "," << r.psnr << "\n";
  }
  save_checkpoint(c.out / "model.ckpt", make_checkpoint(*codec, config_text(cfg), trainer.step, &trainer.adam));
  log << "trained " << trainer.step << " steps at lambda1=" << cfg.lambda1 << "; checkpoint " << (c.out / "model.ckpt").string()
      << "\n";
  return kOk;
}

inline int cmd_encode(const CommandConfig& c, std::ostream& log) {
  const auto ck = load_checkpoint_checked(c.get("checkpoint"));
  const auto codec = codec_from_checkpoint<float>(ck);
  const TrainConfig tcfg = config_from_checkpoint(ck);
  const GopConfig gop = gop_from(c);
  const auto seq = load_input(c, c.get("input"), c.get("synth"), c.seed());
  write_snapshot(c);
  GopResult g;
  const auto recs = evaluate_sequence(*codec, seq, gop, c.get("input").empty() ? c.get("synth") : c.get("input"),
                                      "lambda=" + std::to_string(static_cast<int>(tcfg.lambda1)), tcfg.lambda1, &g);
  Manifest m;
  m.header = {g.width, g.height, gop.gop_size, gop.frame_budget, lambda_id(tcfg.lambda1), tcfg.lambda1,
              codec->config().flow_scale, variant_name(codec->config().variant)};
  m.roles = g.roles;
  m.reports = g.reports;
  write_manifest(c.out / "manifest.json", m);
  write_latents(c.out / "latents.bin", g.latents);
  write_recon(c.out / "recon.bin", g.recon);
  {
    std::ofstream os(c.out / "report.jsonl");
    write_jsonl(os, recs);
  }
  const auto tot = g.total();
  int intra = 0;
  for (auto r : g.roles) intra += r == FrameRole::I;
  log << "encoded " << g.recon.size() << " frames (" << intra << " I) at " << tot.bpp() << " bpp; rates are analytic\n";
  return kOk;
}

inline int cmd_verify(const CommandConfig& c, std::ostream& log) {
  const std::filesystem::path dir = c.get("dir");
  if (dir.empty() || !std::filesystem::is_directory(dir)) throw ValidationError("verify needs dir=<encode output>");
  std::string ckpath = c.get("checkpoint");
  if (ckpath.empty()) {
    std::ifstream is(dir / "config.txt");
    if (!is) throw ValidationError("no checkpoint given and no config.txt in " + dir.string());
    ckpath = parse_key_values(is, (dir / "config.txt").string()).at("checkpoint");
  }
  const auto codec = codec_from_checkpoint<float>(load_checkpoint_checked(ckpath));
  const auto m = read_manifest(dir / "manifest.json");
  const auto lat = read_latents(dir / "latents.bin");
  const auto recon = read_recon(dir / "recon.bin");
  write_snapshot(c);
  const auto v = verify_decode(*codec, m, lat, recon);
  std::ofstream(c.out / "verify.txt") << "frames=" << v.frames << "\nmismatched_frames=" << v.mismatched_frames
                                      << "\nmax_bit_error=" << v.max_bit_error << "\nresult=" << (v.ok() ? "ok" : "MISMATCH") << "\n";
  log << "verify: " << v.frames << " frames, " << v.mismatched_frames << " mismatched, max bit error " << v.max_bit_error
      << (v.ok() ? " -> ok\n" : " -> MISMATCH\n");
  return v.ok() ? kOk : kRuntime;
}

inline int cmd_eval(const CommandConfig& c, std::ostream& log) {
  const auto paths = split_list(c.get("checkpoints"));
  if (paths.empty()) throw ValidationError("eval needs checkpoints=<ckpt,...> (one per lambda)");
  std::vector<std::unique_ptr<Codec<float>>> codecs;
  std::vector<LadderModel<float>> models;
  for (const auto& p : paths) {
    const auto ck = load_checkpoint_checked(p);
    const double lambda = config_from_checkpoint(ck).lambda1;
    codecs.push_back(codec_from_checkpoint<float>(ck));
    models.push_back({"lambda=" + std::to_string(static_cast<int>(lambda)), lambda, codecs.back().get()});
  }
  std::sort(models.begin(), models.end(), [](const auto& a, const auto& b) { return a.lambda < b.lambda; });
  std::vector<NamedSequence> seqs;
  for (const auto& in : split_list(c.get("inputs"))) seqs.push_back({in, load_input(c, in, "", 0)});
  const long long heldout = c.integer("heldout");
  const std::vector<std::string> gens{"moving_square", "moving_texture", "global_pan"};
  for (long long i = 0; i < heldout; ++i) {
    const std::string g = gens[static_cast<std::size_t>(i) % gens.size()];
    seqs.push_back({g + "_" + std::to_string(i), load_input(c, "", g, c.seed() * 1000003ULL + 0xE7A1ULL + i)});
  }
  if (seqs.empty()) throw ValidationError("eval needs inputs=<path,...> or heldout=<count>");
  const GopConfig gop = gop_from(c);
  write_snapshot(c);
  const auto rep = run_protocol(seqs, models, gop, 4, static_cast<int>(c.integer("jobs")));
  std::vector<RDCurve> curves{curve_of(rep.models, "condvc", Metric::Psnr), curve_of(rep.models, "condvc", Metric::Msssim)};
  write_protocol_outputs(c.out, rep, curves, c.get("dataset"));
  for (const auto& m : rep.models) log << m.label << ": bpp " << m.bpp << ", psnr " << m.psnr << ", ms-ssim " << m.msssim << "\n";
  return kOk;
}

inline int cmd_entropy_lab(const CommandConfig& c, std::ostream& log) {
  lab::LabConfig cfg;
  cfg.trials = static_cast<int>(c.integer("trials"));
  cfg.max_alphabet = static_cast<std::size_t>(c.integer("max_alphabet"));
  cfg.predictors_per_trial = static_cast<int>(c.integer("predictors_per_trial"));
  cfg.multi_instances = static_cast<int>(c.integer("multi_instances"));
  cfg.multi_max_alphabet = static_cast<std::size_t>(c.integer("multi_max_alphabet"));
  cfg.multi_codomain = static_cast<std::size_t>(c.integer("multi_codomain"));
  cfg.seed = c.seed();
  if (cfg.trials < 1 || cfg.max_alphabet < 2 || cfg.multi_max_alphabet < 2 || cfg.multi_codomain < 1)
    throw ValidationError("entropy-lab: trials >= 1, alphabets >= 2, codomain >= 1");
  write_snapshot(c);
  const auto rep = lab::run_lab(cfg);
  {
    std::ofstream os(c.out / "report.txt");
    rep.write_text(os);
  }
  {
    std::ofstream os(c.out / "checks.csv");
    rep.write_csv(os);
  }
  rep.write_text(log);
  return rep.violations() == 0 ? kOk : kRuntime;
}

inline int cmd_report(const CommandConfig& c, std::ostream& log) {
  const std::filesystem::path dir = c.get("dir");
  std::ifstream is(dir / "records.jsonl");
  if (dir.empty() || !is) throw ValidationError("report needs dir=<eval output containing records.jsonl>");
  ProtocolReport rep;
  rep.records = read_jsonl(is);
  if (rep.records.empty()) throw ValidationError("no records in " + (dir / "records.jsonl").string());
  {
    std::ifstream cfg(dir / "config.txt");
    if (cfg) {
      const auto kv = parse_key_values(cfg, (dir / "config.txt").string());
      if (kv.count("gop")) rep.gop.gop_size = std::stoi(kv.at("gop"));
      if (kv.count("frames")) rep.gop.frame_budget = std::stoi(kv.at("frames"));
    }
  }
  aggregate(rep);
  write_snapshot(c);
  std::vector<RDCurve> curves{curve_of(rep.models, "condvc", Metric::Psnr), curve_of(rep.models, "condvc", Metric::Msssim)};
  write_protocol_outputs(c.out, rep, curves);
  log << "rebuilt report from " << rep.records.size() << " frame records into " << c.out.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"condvc: learned conditional video coding at desk scale"};
  app.require_subcommand(1);
  struct Sub {
    CLI::App* app;
    std::string config, out;
    std::vector<std::string> sets;
    std::map<std::string, std::string> flag_values;
  };
  std::map<std::string, Sub> subs;
  const std::map<std::string, std::vector<std::pair<std::string, std::string>>> flags{
      {"train", {{"--lambda1", "lambda1"}, {"--init-from", "init_from"}}},
      {"encode", {{"--checkpoint", "checkpoint"}, {"--input", "input"}, {"--synth", "synth"}, {"--gop", "gop"}, {"--frames", "frames"}}},
      {"verify", {{"--dir", "dir"}, {"--checkpoint", "checkpoint"}}},
      {"eval", {{"--checkpoints", "checkpoints"}, {"--inputs", "inputs"}, {"--heldout", "heldout"}, {"--gop", "gop"}, {"--frames", "frames"}}},
      {"entropy-lab", {{"--trials", "trials"}, {"--max-alphabet", "max_alphabet"}}},
      {"report", {{"--dir", "dir"}}}};
  const std::map<std::string, std::string> help{{"train", "two-stage training of one rate point"},
                                                {"encode", "encode a sequence; writes manifest, latents, report"},
                                                {"verify", "re-run the decoder from stored latents and compare"},
                                                {"eval", "test protocol over a lambda ladder"},
                                                {"entropy-lab", "information-theoretic inequality experiments"},
                                                {"report", "rebuild summaries and plots from JSON-lines records"}};
  for (const auto& [name, fl] : flags) {
    Sub& s = subs[name];
    s.app = app.add_subcommand(name, help.at(name));
    s.app->add_option("--config", s.config, "key=value config file");
    s.app->add_option("--set", s.sets, "override, key=value (repeatable)");
    s.app->add_option("--out", s.out, std::string("output directory (default $") + kOutputRootEnv + "/" + name + ")");
    s.app->add_option("--seed", s.flag_values["seed"], "seed for all randomness");
    s.app->add_option("--jobs", s.flag_values["jobs"], "maximum worker threads");
    for (const auto& [flag, key] : fl) s.app->add_option(flag, s.flag_values[key]);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kValidation;
  }
  for (auto& [name, s] : subs) {
    if (!s.app->parsed()) continue;
    KeyValues given;
    for (const auto& [k, v] : s.flag_values)
      if (!v.empty()) given[k] = v;
    try {
      const CommandConfig c = resolve(name, s.config, s.sets, given, s.out);
      if (name == "train") return cmd_train(c, out);
      if (name == "encode") return cmd_encode(c, out);
      if (name == "verify") return cmd_verify(c, out);
      if (name == "eval") return cmd_eval(c, out);
      if (name == "entropy-lab") return cmd_entropy_lab(c, out);
      if (name == "report") return cmd_report(c, out);
    } catch (const ValidationError& e) {
      err << "error: " << e.what() << "\n";
      return kValidation;
    } catch (const std::exception& e) {
      err << "failed: " << e.what() << "\n";
      return kRuntime;
    }
  }
  return kValidation;
}

}  // namespace condvc::cli
