#pragma once

#include <algorithm>
#include <filesystem>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mamba_spike/harness.hpp"

namespace mamba_spike::cli {

// Exit codes: 0 success, 1 usage error, 2 runtime failure.

namespace detail {

inline RunConfig load_config_with_overrides(const std::string& config_path,
                                            const std::string& seed_override,
                                            const std::string& out_override) {
  Config cfg = Config::parse_file(config_path);
  if (!seed_override.empty()) cfg.set("seed", seed_override);
  if (!out_override.empty()) cfg.set("out", out_override);
  return parse_run_config(cfg);
}

inline void print_report(const RunReport& report, std::ostream& out) {
  out << std::left;
  if (!report.epochs.empty()) {
    out << std::setw(7) << "epoch" << std::setw(12) << "train_loss" << std::setw(11) << "train_acc"
        << std::setw(12) << "test_loss" << std::setw(10) << "test_acc" << "\n";
    for (const auto& e : report.epochs) {
      out << std::setw(7) << e.epoch << std::setw(12) << e.train_loss << std::setw(11)
          << e.train_accuracy << std::setw(12) << e.test_loss << std::setw(10) << e.test_accuracy
          << "\n";
    }
  }
  out << "final accuracy    " << report.final_accuracy << "\n";
  out << "macro F1          " << report.final_macro_f1 << "\n";
  out << "spikes per sample ";
  if (report.spikes_per_sample.has_value()) {
    out << *report.spikes_per_sample << "\n";
  } else {
    out << "-\n";
  }
  out << "decision steps    " << report.decision_steps << "\n";
  out << "wall us/sample    " << report.wall_us_per_sample << "\n";
}

inline void print_ablation(const AblationTable& table, std::ostream& out) {
  out << std::left << std::setw(16) << "variant" << std::setw(8) << "seed" << std::setw(10)
      << "accuracy" << std::setw(10) << "macro_f1" << std::setw(14) << "spikes/sample"
      << std::setw(8) << "steps" << "\n";
  for (const auto& r : table.rows) {
    out << std::setw(16) << r.variant << std::setw(8) << r.seed;
    if (r.failed) {
      out << "FAILED: " << r.error << "\n";
      continue;
    }
    out << std::setw(10) << r.accuracy << std::setw(10) << r.macro_f1 << std::setw(14);
    if (r.spikes_per_sample.has_value()) {
      out << *r.spikes_per_sample;
    } else {
      out << "-";
    }
    out << std::setw(8) << r.decision_steps << "\n";
  }
  out << "\nmean accuracy per variant\n";
  for (const auto& v : table.variants()) {
    out << "  " << std::setw(16) << v << table.mean_accuracy(v) << "\n";
  }
}

inline int encode_command(const RunConfig& rc, std::ostream& out) {
  if (rc.out_dir.empty()) {
    throw ContractError("encode needs an output directory (config `out` or --out)");
  }
  namespace fs = std::filesystem;
  mamba_spike::detail::ensure_dir(rc.out_dir);
  std::ostringstream labels;
  labels << "file,label\n";
  std::size_t written = 0;
  if (rc.dataset == DatasetKind::kSynthGesture) {
    for (std::size_t i = 0; i < rc.data.train_samples; ++i) {
      const std::size_t cls = i % rc.data.classes;
      EventStream stream =
          synth_gesture(cls, mix_seed(rc.data.seed, 0x747261696eull, i), rc.data.duration_us,
                        rc.data.width, rc.data.height, rc.data.event_rate);
      std::ostringstream name;
      name << "sample_" << std::setw(5) << std::setfill('0') << i << ".aer";
      write_aer(stream, (fs::path(rc.out_dir) / name.str()).string());
      labels << name.str() << ',' << cls << '\n';
      ++written;
    }
  } else {
    Dataset ds = build_dataset(rc, true);
    for (std::size_t i = 0; i < ds.inputs.size(); ++i) {
      std::ostringstream name;
      name << "sample_" << std::setw(5) << std::setfill('0') << i << ".spk";
      write_spikes(ds.inputs[i], (fs::path(rc.out_dir) / name.str()).string());
      labels << name.str() << ',' << ds.labels[i] << '\n';
      ++written;
    }
  }
  mamba_spike::detail::write_text_file((fs::path(rc.out_dir) / "labels.csv").string(),
                                       labels.str());
  out << "wrote " << written << " samples to " << rc.out_dir << "\n";
  return 0;
}

inline int gradcheck_command(std::ostream& out) {
  const auto suite = gradient_check_suite();
  bool ok = true;
  out << std::left << std::setw(22) << "component" << "max_rel_error\n";
  for (const auto& [name, err] : suite) {
    out << std::setw(22) << name << std::scientific << std::setprecision(3) << err
        << std::defaultfloat << (err < 1e-4 ? "" : "  FAIL") << "\n";
    ok = ok && err < 1e-4;
  }
  return ok ? 0 : 2;
}

}  // namespace detail

/// Runs the command line given argv-style arguments (program name excluded).
inline int run(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Mamba-Spike: spiking front-end + selective state-space experiments"};
  app.require_subcommand(1);

  std::string config_path, seed_override, out_override, checkpoint_path, plan_name = "both";

  CLI::App* c_encode = app.add_subcommand("encode", "encode a dataset to AER/SpikeTensor files");
  CLI::App* c_train = app.add_subcommand("train", "train a model per the run config");
  CLI::App* c_eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  CLI::App* c_ablate = app.add_subcommand("ablate", "run the ablation plan");
  CLI::App* c_gradcheck =
      app.add_subcommand("gradcheck", "run the gradient-check suite and print max errors");

  for (CLI::App* sub : {c_encode, c_train, c_eval, c_ablate}) {
    sub->add_option("--config", config_path, "run configuration file")->required();
    sub->add_option("--seed", seed_override, "override the config seed");
    sub->add_option("--out", out_override, "override the output directory");
  }
  c_eval->add_option("--checkpoint", checkpoint_path, "checkpoint to evaluate")->required();
  c_ablate->add_option("--plan", plan_name, "frontend | tau | both")
      ->check(CLI::IsMember({"frontend", "tau", "both"}));
  std::size_t ablate_seeds = 5;
  c_ablate->add_option("--seeds", ablate_seeds, "seeds per variant");

  std::reverse(args.begin(), args.end());  // CLI11's vector parse pops from the back
  try {
    app.parse(std::move(args));
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (c_gradcheck->parsed()) {
      return detail::gradcheck_command(out);
    }
    RunConfig rc = detail::load_config_with_overrides(config_path, seed_override, out_override);
    if (c_encode->parsed()) {
      return detail::encode_command(rc, out);
    }
    if (c_train->parsed()) {
      RunReport report = train(rc);
      detail::print_report(report, out);
      return 0;
    }
    if (c_eval->parsed()) {
      RunReport report = evaluate(rc, checkpoint_path);
      detail::print_report(report, out);
      return 0;
    }
    if (c_ablate->parsed()) {
      AblationPlan plan;
      plan.frontend_on_off = plan_name == "frontend" || plan_name == "both";
      plan.tau_sweep = plan_name == "tau" || plan_name == "both";
      plan.seeds = ablate_seeds;
      AblationTable table = ablate(rc, plan);
      detail::print_ablation(table, out);
      return 0;
    }
    err << "no subcommand selected\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace mamba_spike::cli
