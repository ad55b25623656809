// Command-line front end. Talks to the library only through stydesty.h.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "stydesty/stydesty.h"

namespace {

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::vector<std::string> ablate;
  std::string out = "runs/latest";
  int max_iters = -1;
};

void add_common(CLI::App* cmd, Common& c, bool training) {
  cmd->add_option("--config", c.config, "TOML config file (defaults apply when omitted)")->check(CLI::ExistingFile);
  cmd->add_option_function<std::uint64_t>(
      "--seed", [&c](std::uint64_t s) { c.seed = s, c.seed_set = true; }, "run seed (overrides the config)");
  cmd->add_option("--out", c.out, "output directory")->capture_default_str();
  if (training) {
    cmd->add_option("--ablate", c.ablate, "ablation switches, comma separated")->delimiter(',');
    cmd->add_option("--max-iters", c.max_iters, "iteration cap (formal stage for train, NAS stage for nas)")
        ->check(CLI::NonNegativeNumber);
  }
}

int report_error(int code) {
  std::cerr << "stydesty: " << stydesty_last_error() << '\n';
  return code;
}

// Loads the config and applies the command-line overrides.
int load(const Common& c, bool nas, stydesty_config** cfg) {
  int rc = c.config.empty() ? stydesty_config_parse("", cfg) : stydesty_config_load(c.config.c_str(), cfg);
  if (rc != STYDESTY_OK) return rc;
  if (c.seed_set && (rc = stydesty_config_set_seed(*cfg, c.seed)) != STYDESTY_OK) return rc;
  for (const auto& a : c.ablate) {
    if (a.empty()) continue;
    if ((rc = stydesty_config_enable_ablation(*cfg, a.c_str())) != STYDESTY_OK) return rc;
  }
  if (c.max_iters >= 0) {
    rc = nas ? stydesty_config_set_nas_max_iters(*cfg, c.max_iters) : stydesty_config_set_max_iters(*cfg, c.max_iters);
  }
  return rc;
}

std::string take(char* s) {
  std::string out = s ? s : "";
  stydesty_free_string(s);
  return out;
}

void print_report(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  const std::string metric = j.at("metric").get<std::string>();
  std::printf("selected position: %d\n", j.at("selected_position").get<int>());
  std::printf("%-28s %10s\n", "domain", metric.c_str());
  for (const auto& [name, v] : j.at("per_domain").items()) std::printf("%-28s %10.4f\n", name.c_str(), v.get<double>());
  std::printf("%-28s %10.4f\n", "average (targets)", j.at("average").get<double>());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stydesty: single-domain generalization by stylization and destylization"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(stydesty_version()));

  std::string command_line;
  for (int i = 0; i < argc; ++i) command_line += (i ? " " : "") + std::string(argv[i]);

  Common train_opts, nas_opts, eval_opts, style_opts;
  auto* train = app.add_subcommand("train", "NAS stage, formal training and evaluation");
  add_common(train, train_opts, true);
  auto* nas = app.add_subcommand("nas", "run only the NAS stage and write nas.json");
  add_common(nas, nas_opts, true);

  auto* eval = app.add_subcommand("eval", "evaluate checkpoints on the configured suite");
  add_common(eval, eval_opts, false);
  std::string eval_ckpt;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint directory holding F, H and G")->required();

  auto* stylize = app.add_subcommand("stylize", "dump (original, stylized) PPM pairs");
  add_common(stylize, style_opts, false);
  std::string style_ckpt;
  int count = 4;
  stylize->add_option("--checkpoint", style_ckpt, "checkpoint directory holding G")->required();
  stylize->add_option("-n,--count", count, "number of pairs")->check(CLI::PositiveNumber)->capture_default_str();

  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  std::string scope = "all", fault;
  std::uint64_t grad_seed = 2024;
  std::string grad_out;
  grad->add_option("scope", scope, "all, ops, composites, or one op name")->capture_default_str();
  grad->add_option("--seed", grad_seed, "geometry seed")->capture_default_str();
  grad->add_option("--out", grad_out, "write gradcheck.json here");
  grad->add_option("--inject-fault", fault, "negate the backward rule of one op (test fixture)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return STYDESTY_CONFIG_ERROR;
  }

  stydesty_set_threads(0);
  stydesty_config* cfg = nullptr;
  int rc = STYDESTY_OK;

  if (*train || *nas) {
    const bool nas_only = static_cast<bool>(*nas);
    const auto& o = nas_only ? nas_opts : train_opts;
    if ((rc = load(o, nas_only, &cfg)) != STYDESTY_OK) return report_error(rc);
    char* out = nullptr;
    rc = nas_only ? stydesty_nas(cfg, o.out.c_str(), command_line.c_str(), &out)
                  : stydesty_train(cfg, o.out.c_str(), command_line.c_str(), &out);
    stydesty_config_free(cfg);
    if (rc != STYDESTY_OK) return report_error(rc);
    const std::string text = take(out);
    if (nas_only) {
      const auto j = nlohmann::json::parse(text);
      std::printf("selected position: %d after %d iterations (%s)\n", j.at("selected_position").get<int>(),
                  j.at("iterations").get<int>(), j.at("converged").get<bool>() ? "converged" : "WARNING: not converged");
    } else {
      print_report(text);
    }
    std::printf("outputs in %s\n", o.out.c_str());
    return STYDESTY_OK;
  }

  if (*eval) {
    if ((rc = load(eval_opts, false, &cfg)) != STYDESTY_OK) return report_error(rc);
    char* out = nullptr;
    rc = stydesty_eval(cfg, eval_ckpt.c_str(), eval_opts.out.c_str(), command_line.c_str(), &out);
    stydesty_config_free(cfg);
    if (rc != STYDESTY_OK) return report_error(rc);
    print_report(take(out));
    return STYDESTY_OK;
  }

  if (*stylize) {
    if ((rc = load(style_opts, false, &cfg)) != STYDESTY_OK) return report_error(rc);
    rc = stydesty_stylize(cfg, style_ckpt.c_str(), count, style_opts.seed, style_opts.out.c_str(),
                          command_line.c_str());
    stydesty_config_free(cfg);
    if (rc != STYDESTY_OK) return report_error(rc);
    std::printf("wrote %d PPM pairs to %s\n", count, style_opts.out.c_str());
    return STYDESTY_OK;
  }

  char* table = nullptr;
  char* json = nullptr;
  rc = stydesty_gradcheck(scope.c_str(), fault.empty() ? nullptr : fault.c_str(), grad_seed, &table, &json);
  if (rc != STYDESTY_OK && rc != STYDESTY_CHECK_FAILED) return report_error(rc);
  std::fputs(take(table).c_str(), stdout);
  const std::string report = take(json);
  if (!grad_out.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(grad_out, ec);
    std::ofstream(std::filesystem::path(grad_out) / "gradcheck.json") << report << '\n';
  }
  if (rc == STYDESTY_CHECK_FAILED) return report_error(rc);
  return STYDESTY_OK;
}
