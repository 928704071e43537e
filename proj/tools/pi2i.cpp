// pi2i - batch front end for the two-stage personalized i2i retrieval
// pipeline: build-index -> sample -> train -> evaluate / retrieve / sweep /
// stats. Every run is a pure function of (config file, CLI overrides, input
// files); CLI flags win over config file values.

#include <cstdio>
#include <exception>
#include <functional>
#include <string>

#include <CLI11.hpp>

#include "pi2i/config.hpp"
#include "pi2i/pipeline.hpp"

namespace {

struct SubcommandState {
  CLI::App* app = nullptr;
  std::string config_path;
  bool print_config = false;
  pi2i::PipelineConfig overrides;  // parsed flag values land here
  std::vector<std::function<void(pi2i::PipelineConfig&)>> apply;  // set flags only
};

void add_config_options(SubcommandState& st) {
  st.app->add_option("--config", st.config_path, "Config file (flat key = value lines)");
  st.app->add_flag("--print-config", st.print_config,
                   "Print the effective config in canonical form and exit");
  st.overrides.visit([&](const char* key, auto& field) {
    using Field = std::decay_t<decltype(field)>;
    const std::string flag = std::string("--") + key;
    CLI::Option* opt;
    if constexpr (std::is_same_v<Field, bool>) {
      opt = st.app->add_option(flag, field, "")->expected(1);
    } else {
      opt = st.app->add_option(flag, field, "");
    }
    opt->default_str(pi2i::cfgdetail::to_value(field));
    // Copy the parsed value over the file-loaded config only when the flag
    // was actually given.
    auto* field_ptr = &field;
    std::string key_copy = key;
    st.apply.push_back([opt, field_ptr, key_copy](pi2i::PipelineConfig& cfg) {
      if (opt->count() == 0) return;
      cfg.visit([&](const char* k, auto& dst) {
        if (key_copy != k) return;
        if constexpr (std::is_same_v<std::decay_t<decltype(dst)>, Field>) dst = *field_ptr;
      });
    });
  });
}

pi2i::PipelineConfig resolve_config(SubcommandState& st) {
  pi2i::PipelineConfig cfg;
  if (!st.config_path.empty()) cfg = pi2i::load_config(st.config_path);
  for (auto& apply : st.apply) apply(cfg);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pi2i: personalized item-to-item retrieval pipeline"};
  app.require_subcommand(1);

  struct Cmd {
    const char* name;
    const char* help;
    void (*run)(const pi2i::PipelineConfig&);
  };
  const Cmd commands[] = {
      {"build-index", "Build the truncated swing i2i table from the training split", pi2i::cmd_build_index},
      {"sample", "Generate trigger-target training samples and stats", pi2i::cmd_sample},
      {"train", "Sample and train the scoring model, write checkpoint + log", pi2i::cmd_train},
      {"evaluate", "Score test queries and report HR@K", pi2i::cmd_evaluate},
      {"retrieve", "Dump scored top-K lists for test queries", pi2i::cmd_retrieve},
      {"sweep", "Evaluate across truncation sizes", pi2i::cmd_sweep},
      {"stats", "Trigger recency index histograms over hits", pi2i::cmd_stats},
  };

  std::vector<std::unique_ptr<SubcommandState>> states;
  for (const Cmd& cmd : commands) {
    auto st = std::make_unique<SubcommandState>();
    st->app = app.add_subcommand(cmd.name, cmd.help);
    add_config_options(*st);
    SubcommandState* stp = st.get();
    auto run = cmd.run;
    stp->app->callback([stp, run] {
      pi2i::PipelineConfig cfg = resolve_config(*stp);
      if (stp->print_config) {
        std::fputs(pi2i::serialize_config(cfg).c_str(), stdout);
        return;
      }
      run(cfg);
    });
    states.push_back(std::move(st));
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const pi2i::ConfigError& e) {
    std::fprintf(stderr, "pi2i: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "pi2i: %s\n", e.what());
    return 1;
  }
  return 0;
}
