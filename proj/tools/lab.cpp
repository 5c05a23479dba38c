#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "stalab/error.hpp"
#include "stalab/parallel.hpp"
#include "stalab/run.hpp"

namespace {

struct Common {
    std::string config;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    std::string out = "run";
    bool force = false;
    bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "JSON config; unspecified keys take their defaults");
    cmd->add_option("--set", c.overrides, "Override a config key, e.g. --set attack.runs_per_prompt=3");
    cmd->add_option("--seed", c.seed, "Master seed");
    cmd->add_option("--out", c.out, "Run directory")->capture_default_str();
    cmd->add_flag("--force", c.force, "Rerun stages whose configuration changed");
    cmd->add_flag("-q,--quiet", c.quiet, "Do not log stage progress");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Soft token attack laboratory"};
    app.require_subcommand(1);
    Common common;
    std::string method = "all";
    std::string model = "all";

    struct Command {
        const char* name;
        const char* help;
    };
    const std::vector<Command> commands{
        {"gen-corpus", "Generate facts, splits and filler text"},
        {"pretrain", "Train the base model on filler text"},
        {"finetune", "Fine-tune the base model on the trained facts"},
        {"unlearn", "Build unlearned models (method name, all, or retrain)"},
        {"attack", "Run soft token attacks on zoo models"},
        {"randstring", "Random-string length sweep on the base model"},
        {"audit", "Welch comparisons, tables and the oracle audit"},
        {"probe", "Linear probe over single soft tokens"},
        {"report", "Assemble the run report"},
        {"pipeline", "Run every stage in order"},
        {"print-config", "Print the resolved configuration"},
    };
    std::vector<CLI::App*> subs;
    for (const auto& c : commands) {
        auto* sub = app.add_subcommand(c.name, c.help);
        add_common(sub, common);
        if (std::string(c.name) == "unlearn") sub->add_option("method", method, "Method")->capture_default_str();
        if (std::string(c.name) == "attack") sub->add_option("model", model, "Zoo model id")->capture_default_str();
        subs.push_back(sub);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        std::optional<std::filesystem::path> config_path;
        if (!common.config.empty()) config_path = common.config;
        auto config = stalab::load_config(config_path, common.overrides, common.seed);
        std::string name;
        for (auto* sub : subs)
            if (sub->parsed()) name = sub->get_name();
        if (name == "print-config") {
            std::cout << stalab::to_json(config).dump(2) << '\n';
            return 0;
        }
        stalab::Lab lab(config, common.out, stalab::worker_count_from_env(), common.force);
        if (!common.quiet) lab.set_log([](const std::string& msg) { std::cerr << "[lab] " << msg << std::endl; });
        if (name == "gen-corpus") lab.gen_corpus();
        else if (name == "pretrain") lab.pretrain();
        else if (name == "finetune") lab.finetune();
        else if (name == "unlearn") lab.unlearn(method);
        else if (name == "attack") model == "all" ? lab.attack() : lab.attack_model(model);
        else if (name == "randstring") lab.randstring();
        else if (name == "audit") lab.audit();
        else if (name == "probe") lab.probe();
        else if (name == "report") lab.report();
        else if (name == "pipeline") lab.pipeline();
        return 0;
    } catch (const stalab::Error& e) {
        std::cerr << "error: " << e.error_class() << ": " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: InternalError: " << e.what() << '\n';
        return 3;
    }
}
