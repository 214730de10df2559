// dit4sr_cli <command> [--config FILE] [--section.key=value ...]

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dit4sr/commands.hpp"

using namespace dit4sr;

namespace {

struct Invocation {
    std::string config_path;
    CLI::App* app = nullptr;
};

RunConfig resolve(const Invocation& inv) {
    RunConfig cfg = inv.config_path.empty() ? RunConfig{} : load_config(inv.config_path);
    apply_overrides(cfg, inv.app->remaining());
    cfg.validate();
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Three-stream diffusion transformer for image super-resolution"};
    app.require_subcommand(1);

    std::vector<Invocation> invs;
    invs.reserve(8);
    auto add = [&](const std::string& name, const std::string& help) -> Invocation& {
        auto& inv = invs.emplace_back();
        inv.app = app.add_subcommand(name, help);
        inv.app->allow_extras();
        inv.app->add_option("-c,--config", inv.config_path, "sectioned key=value config file");
        inv.app->footer("Any config key may be overridden with --section.key=value.");
        return inv;
    };

    auto& synth = add("synth", "write procedural HR/LR pairs, traces and a manifest to paths.data_dir");
    auto& train = add("train", "train model.variant; writes the checkpoint, metrics.csv and eval.csv");
    bool resume = false;
    train.app->add_flag("--resume", resume, "continue from paths.checkpoint");
    auto& samp = add("sample", "restore paths.input into paths.output with the checkpoint");
    auto& ablate = add("ablate", "matched-seed training of ablate.variants; writes ablation.csv/.txt");
    auto& attn = add("attn", "attention region statistics and map images on held-out probes");
    auto& grad = add("gradcheck", "finite-difference check of every op, the block and the model");
    auto& show = add("config", "print the effective configuration");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n" << app.help();
        return kExitUsage;
    }

    return run_guarded([&]() -> int {
        if (*synth.app) {
            const auto entries = cmd_synth(resolve(synth));
            std::cout << entries.size() << " pairs\n";
        } else if (*train.app) {
            const auto s = cmd_train(resolve(train), resume);
            std::cout << "steps " << s.steps_done << "\n" << eval_csv(s.eval);
        } else if (*samp.app) {
            const auto img = cmd_sample(resolve(samp));
            std::cout << img.width << "x" << img.height << "\n";
        } else if (*ablate.app) {
            std::cout << cmd_ablate(resolve(ablate)).to_table();
        } else if (*attn.app) {
            const auto s = cmd_attn(resolve(attn));
            for (const auto& d : s.depth)
                std::cout << "block " << d.block << " X->L diagonal " << d.diagonal << " off-diagonal "
                          << d.off_diagonal << "\n";
        } else if (*grad.app) {
            const auto r = cmd_gradcheck(resolve(grad));
            std::cout << r.to_text() << (r.all_pass() ? "all items within tolerance" : "gradient check FAILED")
                      << " (" << r.seconds << " s)\n";
            return r.all_pass() ? kExitOk : kExitNumerical;
        } else if (*show.app) {
            std::cout << dump_config(resolve(show));
        }
        return kExitOk;
    });
}
