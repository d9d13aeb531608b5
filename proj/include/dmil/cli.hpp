#pragma once

// Command-line front end. Kept in a header so tests can drive it in-process;
// tools/dmil.cpp is a thin main().

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dmil/checkpoint.hpp"
#include "dmil/experiment.hpp"
#include "dmil/gradcheck.hpp"
#include "dmil/synthdata.hpp"
#include "dmil/training.hpp"

namespace dmil::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2, kCheckFailed = 3 };

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Runs a validation step, reporting rejected values as usage errors.
template <typename F>
void as_usage(F&& f) {
  try {
    f();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

inline std::vector<double> parse_doubles(const std::string& s, const char* what) {
  std::vector<double> out;
  for (const auto& item : split_list(s)) {
    double v = 0;
    if (!parse_double(item, v)) throw UsageError(std::string("bad number in --") + what + ": " + item);
    out.push_back(v);
  }
  if (out.empty()) throw UsageError(std::string("--") + what + " is empty");
  return out;
}

inline std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  for (const auto& item : split_list(s)) {
    std::uint64_t v = 0;
    const auto r = std::from_chars(item.data(), item.data() + item.size(), v);
    if (r.ec != std::errc() || r.ptr != item.data() + item.size())
      throw UsageError("bad seed: " + item);
    out.push_back(v);
  }
  if (out.empty()) throw UsageError("--seeds is empty");
  return out;
}

inline std::vector<Variant> parse_variants(const std::string& s) {
  std::vector<Variant> out;
  as_usage([&] {
    for (const auto& item : split_list(s)) out.push_back(parse_variant(item));
  });
  if (out.empty()) throw UsageError("--variants is empty");
  return out;
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) os << ',';
    if constexpr (std::is_same_v<T, double>) os << format_double(v[i]);
    else if constexpr (std::is_same_v<T, Variant>) os << to_string(v[i]);
    else os << v[i];
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Config file: flat key=value lines, '#' starts a comment. Keys are long flag
// names. Entries are spliced in ahead of the real flags; options keep the
// last value given, so the command line wins.

inline std::vector<std::string> read_config_tokens(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot open config file " + path);
  std::vector<std::string> tokens;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0)
      throw UsageError(path + ":" + std::to_string(line_no) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    if (key == "config") throw UsageError(path + ": nested config files are not supported");
    const std::string value = trim(line.substr(eq + 1));
    if (value.empty()) continue;  // an empty value means "use the default"
    tokens.push_back("--" + key + "=" + value);
  }
  return tokens;
}

inline std::string find_config_path(const std::vector<std::string>& args) {
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  return path;
}

// Effective value of every option on a subcommand, in declaration order.
inline void dump_config(const CLI::App& sub, std::ostream& os) {
  for (const CLI::Option* opt : sub.get_options()) {
    const std::string key = opt->get_single_name();
    if (key == "help" || key == "config" || key == "dump-config") continue;
    std::string value = opt->count() > 0 ? opt->as<std::string>() : opt->get_default_str();
    if (opt->get_expected_min() == 0) value = opt->as<bool>() ? "true" : "false";
    os << key << '=' << value << '\n';
  }
}

// ---------------------------------------------------------------------------
// Shared training flags

struct TrainFlags {
  TrainConfig config;
  std::string variant = std::string(to_string(Variant::ClsDetRS));
  bool b_term_weak_only = false;

  void add_to(CLI::App* sub) {
    sub->add_option("--variant", variant, "cls-det-rs | cls-det | db-baseline | max-region");
    sub->add_option("--k", config.k, "regions kept by the detection top-k");
    sub->add_option("--alpha", config.alpha, "IoM threshold for region labels");
    sub->add_option("--lambda2", config.lambda2, "weight of the fully supervised term");
    sub->add_option("--beta", config.beta, "classification vs detection balance");
    sub->add_option("--lr", config.learning_rate, "Adam learning rate");
    sub->add_option("--epochs", config.epochs);
    sub->add_option("--batch-size", config.batch_size_images, "images per mini-batch");
    sub->add_option("--hidden", config.hidden_dim, "shared layer width");
    sub->add_option("--dropout-keep", config.dropout_keep);
    sub->add_option("--l2", config.l2_coefficient, "weight decay coefficient");
    sub->add_flag("--b-term-weak-only", b_term_weak_only,
                  "benign weak term over weakly labeled images only");
  }

  TrainConfig resolve() const {
    TrainConfig c = config;
    as_usage([&] { c.variant = parse_variant(variant); });
    c.b_term_all_images = !b_term_weak_only;
    as_usage([&] { validate(c); });
    return c;
  }
};

inline Dataset load_dataset(const std::string& path) {
  if (!std::filesystem::exists(path)) throw UsageError("dataset not found: " + path);
  return read_dataset_file(path);
}

inline void ensure_parent(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
}

inline std::ofstream open_out(const std::string& path) {
  ensure_parent(path);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  return os;
}

// ---------------------------------------------------------------------------
// Subcommands

struct GenerateCmd {
  GenConfig g;
  std::string class_mix = "0.25,0.35,0.25,0.15";
  std::string out;

  void add_to(CLI::App* sub) {
    sub->add_option("--n", g.n_images, "number of images");
    sub->add_option("--width", g.image_width);
    sub->add_option("--height", g.image_height);
    sub->add_option("--side", g.side, "region side");
    sub->add_option("--stride", g.stride, "region stride");
    sub->add_option("--feature-dim", g.feature_dim);
    sub->add_option("--class-mix", class_mix, "proportions of N,B,M,MB images");
    sub->add_option("--separation", g.separation, "lesion signal in noise std units");
    sub->add_option("--lesion-min", g.lesion_min);
    sub->add_option("--lesion-max", g.lesion_max);
    sub->add_option("--full-ratio", g.full_ratio, "fraction of malignant images annotated");
    sub->add_option("--seed", g.seed);
    sub->add_option("--out", out, "dataset file")->required();
  }

  int run(std::ostream& os) {
    const auto mix = parse_doubles(class_mix, "class-mix");
    if (mix.size() != 4) throw UsageError("--class-mix needs four proportions (N,B,M,MB)");
    std::copy(mix.begin(), mix.end(), g.class_mix.begin());
    as_usage([&] { validate(g); });
    const auto bags = generate(g);
    write_dataset_file(out, {header_for(g), bags});

    std::map<ImageClass, int> counts;
    int full = 0, malignant = 0;
    for (const auto& b : bags) {
      ++counts[image_class(b.weak_label)];
      malignant += b.weak_label.y_M;
      full += b.supervision == Supervision::Full;
    }
    os << "images " << bags.size();
    for (ImageClass c : {ImageClass::N, ImageClass::B, ImageClass::M, ImageClass::MB})
      os << ' ' << to_string(c) << '=' << counts[c];
    os << " full=" << full << '/' << malignant << '\n';
    return kOk;
  }
};

struct TrainCmd {
  TrainFlags flags;
  std::string data, out, loss_log;
  double full_ratio_used = 1.0;
  std::uint64_t seed = 0;

  void add_to(CLI::App* sub) {
    sub->add_option("--data", data, "training dataset")->required();
    flags.add_to(sub);
    sub->add_option("--full-ratio-used", full_ratio_used,
                    "fraction of the annotated images whose annotations are used");
    sub->add_option("--seed", seed);
    sub->add_option("--out", out, "checkpoint file")->required();
    sub->add_option("--loss-log", loss_log, "per-epoch loss log (default <out>.loss.csv)");
  }

  int run(std::ostream& os) {
    TrainConfig c = flags.resolve();
    c.seed = seed;
    if (!(full_ratio_used >= 0.0 && full_ratio_used <= 1.0))
      throw UsageError("--full-ratio-used must lie in [0, 1]");
    const Dataset ds = load_dataset(data);
    const auto bags = subsample_full(ds.bags, full_ratio_used, seed);
    const TrainResult r = train(bags, c);
    ensure_parent(out);
    save_checkpoint(out, r.params);

    std::ofstream log = open_out(loss_log.empty() ? out + ".loss.csv" : loss_log);
    log << "epoch,loss,weak_loss\n";
    for (std::size_t e = 0; e < r.loss_history.size(); ++e)
      log << e + 1 << ',' << format_double(r.loss_history[e]) << ','
          << format_double(r.weak_loss_history[e]) << '\n';
    os << "trained " << to_string(c.variant) << " for " << c.epochs << " epochs on "
       << bags.size() << " images";
    if (!r.loss_history.empty()) os << ", final loss " << fmt(r.loss_history.back(), 6);
    os << '\n';
    return kOk;
  }
};

struct EvalCmd {
  std::string data, checkpoint, out;
  std::uint64_t seed = 0;  // accepted for uniformity; evaluation draws no randomness

  void add_to(CLI::App* sub) {
    sub->add_option("--data", data, "evaluation dataset")->required();
    sub->add_option("--checkpoint", checkpoint)->required();
    sub->add_option("--seed", seed);
    sub->add_option("--out", out, "output directory")->required();
  }

  int run(std::ostream& os) {
    const Dataset ds = load_dataset(data);
    const ModelParams params = load_checkpoint(checkpoint);
    if (params.shared_w.rows() != std::size_t(ds.header.feature_dim))
      throw DataError("checkpoint expects " + std::to_string(params.shared_w.rows()) +
                      " features, dataset has " + std::to_string(ds.header.feature_dim));
    const EvalReport r = evaluate(params, ds.bags);

    const std::filesystem::path dir(out);
    std::filesystem::create_directories(dir);
    std::ostringstream text;
    write_report_text(text, r);
    {
      auto f = open_out((dir / "report.txt").string());
      f << text.str();
    }
    {
      auto f = open_out((dir / "summary.csv").string());
      write_report_csv(f, r);
    }
    const std::pair<const EvalCurve*, const char*> curves[] = {
        {&r.froc_m, "froc_M.csv"},
        {&r.froc_b, "froc_B.csv"},
        {&r.froc_m_at_op, "froc_M_at_op.csv"},
        {&r.froc_b_at_op, "froc_B_at_op.csv"}};
    for (const auto& [curve, name] : curves) {
      if (curve->points.empty()) continue;
      auto f = open_out((dir / name).string());
      write_curve(f, *curve, std::string(name).substr(5, 1));
    }
    {
      auto f = open_out((dir / "probability_plane.csv").string());
      write_probability_plane(f, r.scored);
    }
    os << text.str();
    return kOk;
  }
};

struct GradcheckCmd {
  int configs = 10;
  std::string variants = join(std::vector<Variant>(kAllVariants.begin(), kAllVariants.end()));
  std::uint64_t seed = 0;
  bool inject_sign_flip = false;
  std::string out;

  void add_to(CLI::App* sub) {
    sub->add_option("--configs", configs, "random configurations per variant and split");
    sub->add_option("--variant", variants, "comma-separated variants to check");
    sub->add_option("--seed", seed);
    sub->add_flag("--inject-sign-flip", inject_sign_flip,
                  "flip one analytic gradient entry (checks the checker)");
    sub->add_option("--out", out, "optional report file");
  }

  int run(std::ostream& os) {
    if (configs < 1) throw UsageError("--configs must be >= 1");
    const auto vs = parse_variants(variants);
    Rng rng(seed);
    std::map<std::string, double> worst;
    for (std::size_t t = 0; t < ParamTensors::kNames.size(); ++t)
      worst[std::string(ParamTensors::kNames[t])] = 0.0;
    std::vector<std::string> names(ParamTensors::kNames.begin(), ParamTensors::kNames.end());
    std::size_t run_count = 0;
    for (Variant v : vs)
      for (SplitKind s : {SplitKind::Weak, SplitKind::Semi, SplitKind::Full})
        for (int i = 0; i < configs; ++i) {
          const GradCheckResult r = check_case(random_case(rng, v, s), kGradCheckStep,
                                               inject_sign_flip && run_count == 0);
          ++run_count;
          for (const auto& t : r.tensors)
            worst[std::string(t.name)] = std::max(worst[std::string(t.name)], t.worst_rel_error);
        }
    std::ostringstream report;
    std::vector<std::string> offending;
    report << "gradcheck " << run_count << " configurations, tolerance "
           << format_double(kGradCheckTolerance) << '\n';
    for (const auto& n : names) {
      const bool bad = worst[n] > kGradCheckTolerance;
      if (bad) offending.push_back(n);
      char line[96];
      std::snprintf(line, sizeof line, "  %-10s %.3e %s\n", n.c_str(), worst[n],
                    bad ? "FAIL" : "ok");
      report << line;
    }
    report << (offending.empty() ? "PASS" : "FAIL: " + join(offending)) << '\n';
    os << report.str();
    if (!out.empty()) open_out(out) << report.str();
    return offending.empty() ? kOk : kCheckFailed;
  }
};

struct SweepCmd {
  TrainFlags flags;
  std::string train_path, test_path, out;
  std::string variants = std::string(to_string(Variant::ClsDetRS));
  std::string ratios = join(kDefaultSweepRatios);
  std::string seeds = "1,2,3,4,5";
  unsigned threads = 1;

  void add_to(CLI::App* sub) {
    sub->add_option("--train", train_path, "training dataset with annotations")->required();
    sub->add_option("--test", test_path, "evaluation dataset")->required();
    sub->add_option("--variants", variants, "comma-separated variants");
    sub->add_option("--ratios", ratios, "comma-separated annotation ratios");
    sub->add_option("--seeds", seeds, "comma-separated training seeds");
    sub->add_option("--threads", threads, "concurrent trainings");
    flags.add_to(sub);
    sub->add_option("--out", out, "table file (stdout when empty)");
  }

  int run(std::ostream& os) {
    const TrainConfig base = flags.resolve();
    const auto vs = parse_variants(variants);
    const auto rs = parse_doubles(ratios, "ratios");
    for (double r : rs)
      if (!(r >= 0.0 && r <= 1.0)) throw UsageError("ratios must lie in [0, 1]");
    const auto ss = parse_seeds(seeds);
    const Dataset tr = load_dataset(train_path);
    const Dataset te = load_dataset(test_path);
    if (tr.header.feature_dim != te.header.feature_dim)
      throw DataError("train and test feature dimensions differ");
    const auto rows = run_sweep(tr.bags, te.bags, base, vs, rs, ss, std::max(1u, threads));
    if (out.empty()) {
      write_sweep_csv(os, rows);
    } else {
      auto f = open_out(out);
      write_sweep_csv(f, rows);
      os << "wrote " << rows.size() << " rows to " << out << '\n';
    }
    return kOk;
  }
};

// ---------------------------------------------------------------------------

inline int run(std::vector<std::string> args, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"Dual-branch multiple-instance detection: generate, train, eval, gradcheck, sweep"};
  app.name("dmil");
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default()->multi_option_policy(
      CLI::MultiOptionPolicy::TakeLast);

  GenerateCmd gen;
  TrainCmd trn;
  EvalCmd evl;
  GradcheckCmd gck;
  SweepCmd swp;
  std::string config_path;
  bool dump = false;

  struct Entry {
    CLI::App* sub;
    std::function<int(std::ostream&)> run;
  };
  std::vector<Entry> entries;
  auto add = [&](const char* name, const char* help, auto& cmd) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "flat key=value config file");
    sub->add_flag("--dump-config", dump, "print the effective config and exit");
    cmd.add_to(sub);
    entries.push_back({sub, [&cmd](std::ostream& os) { return cmd.run(os); }});
  };
  add("generate", "write a synthetic dataset", gen);
  add("train", "train a model and write a checkpoint", trn);
  add("eval", "evaluate a checkpoint on a dataset", evl);
  add("gradcheck", "compare analytic gradients with finite differences", gck);
  add("sweep", "train and evaluate across annotation ratios and seeds", swp);

  try {
    const std::string cfg = find_config_path(args);
    if (!cfg.empty() && !args.empty()) {
      const auto tokens = read_config_tokens(cfg);
      args.insert(args.begin() + 1, tokens.begin(), tokens.end());
    }
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }

  for (const auto& e : entries) {
    if (!e.sub->parsed()) continue;
    if (dump) {
      dump_config(*e.sub, out);
      return kOk;
    }
    try {
      return e.run(out);
    } catch (const UsageError& ex) {
      err << "error: " << ex.what() << '\n';
      return kUsage;
    } catch (const std::exception& ex) {
      err << "error: " << ex.what() << '\n';
      return kDataError;
    }
  }
  return kUsage;
}

}  // namespace dmil::cli
