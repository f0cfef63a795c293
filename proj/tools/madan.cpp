// madan: synth / train / translate / eval / report.
//
// stdout carries progress, stderr carries exactly one JSON line on failure:
//   {"error": "<kind>", "message": "..."}

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "madan/cli.hpp"

namespace {

int report_error(madan::ErrorKind kind, const std::string& message) {
  std::cerr << nlohmann::json{{"error", std::string(madan::to_string(kind))}, {"message", message}}.dump() << "\n";
  return madan::exit_code(kind);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-source adversarial domain aggregation"};
  app.require_subcommand(1);

  std::string spec_file, out;
  auto* synth = app.add_subcommand("synth", "write a synthetic multi-source dataset");
  synth->add_option("--spec", spec_file, "synthesis spec JSON")->required();
  synth->add_option("--out", out, "output dataset directory (default $MDAGGR_OUT)");

  madan::TrainOptions topt;
  std::optional<std::uint64_t> seed;
  auto* train = app.add_subcommand("train", "run the three-stage schedule");
  train->add_option("--config", topt.config_file, "TrainConfig JSON");
  train->add_option("--data", topt.data, "dataset directory, manifest.json, or synthesis spec JSON")->required();
  train->add_option("--mode", topt.mode, "madan | madan+ | source_only");
  train->add_option("--out", topt.out, "run directory (default $MDAGGR_OUT)");
  train->add_option("--seed", seed, "master seed");
  train->add_option("--override", topt.overrides, "section.key=value (repeatable)");

  std::string checkpoint, source, in_dir, tout;
  auto* translate = app.add_subcommand("translate", "adapt a directory of images with one source translator");
  translate->add_option("--checkpoint", checkpoint)->required();
  translate->add_option("--source", source, "source domain name")->required();
  translate->add_option("--in", in_dir)->required();
  translate->add_option("--out", tout)->required();

  std::string eval_ckpt, eval_data, domain, report_file;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on one labeled domain");
  eval->add_option("--checkpoint", eval_ckpt)->required();
  eval->add_option("--data", eval_data)->required();
  eval->add_option("--domain", domain)->required();
  eval->add_option("--report", report_file)->required();

  std::vector<std::string> runs;
  std::string report_out;
  auto* report = app.add_subcommand("report", "mean ± stdev comparison over run directories");
  report->add_option("--runs", runs)->required();
  report->add_option("--out", report_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error(madan::ErrorKind::usage, e.what());
  }

  try {
    if (*synth) {
      madan::cmd_synth(spec_file, out);
    } else if (*train) {
      topt.seed = seed;
      madan::cmd_train(topt);
    } else if (*translate) {
      madan::cmd_translate(checkpoint, source, in_dir, tout);
    } else if (*eval) {
      madan::cmd_eval(eval_ckpt, eval_data, domain, report_file);
    } else if (*report) {
      std::vector<madan::fs::path> paths(runs.begin(), runs.end());
      madan::cmd_report(paths, report_out);
    }
  } catch (const madan::Error& e) {
    return report_error(e.kind(), e.what());
  } catch (const nlohmann::json::exception& e) {
    return report_error(madan::ErrorKind::load, e.what());
  } catch (const std::exception& e) {
    return report_error(madan::ErrorKind::io, e.what());
  }
  return 0;
}
