// Command-line front end. Exit codes: 0 success, 2 usage/config error,
// 1 runtime failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "dreamclear/degrade.hpp"
#include "dreamclear/genir.hpp"
#include "dreamclear/harness.hpp"
#include "dreamclear/textures.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dreamclear;

namespace {

void log_line(const std::string& s) { std::cerr << s << '\n'; }

/// Config file (optional) with flag overrides applied on top. Parse and
/// validation problems surface as ConfigError.
template <typename Config>
Config load_config(const std::string& path, const std::function<void(json&)>& overrides) {
    json j = path.empty() ? json::object() : read_json_file(path);
    overrides(j);
    try {
        Config c = j.get<Config>();
        c.validate();
        return c;
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("invalid configuration: ") + e.what());
    }
}

template <typename T>
void set_if(json& j, const std::string& key, const std::optional<T>& v) {
    if (v) j[key] = *v;
}

void require_file(const std::string& path, const char* what) {
    if (path.empty() || !fs::is_regular_file(path)) throw ConfigError(std::string(what) + " not found: " + path);
}

std::vector<fs::path> png_inputs(const fs::path& in) {
    std::vector<fs::path> out;
    if (fs::is_directory(in)) {
        for (const auto& e : fs::directory_iterator(in)) {
            if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
        }
        std::sort(out.begin(), out.end());
    } else if (fs::is_regular_file(in)) {
        out.push_back(in);
    } else {
        throw ConfigError("input not found: " + in.string());
    }
    return out;
}

// ---------------------------------------------------------------- degrade

struct DegradeArgs {
    std::string config, hq_dir, out;
    int procedural = 0;
    int crop = 64;
    std::uint64_t seed = 0;
};

int run_degrade(const DegradeArgs& a) {
    if (a.out.empty()) throw ConfigError("--out is required");
    if (a.hq_dir.empty() == (a.procedural == 0)) throw ConfigError("give exactly one of --hq-dir or --procedural");
    if (a.crop <= 0 || a.crop % 4 != 0) throw ConfigError("--crop must be a positive multiple of 4");
    DegradationConfig cfg;
    if (!a.config.empty()) {
        try {
            cfg = read_json_file(a.config).get<DegradationConfig>();
            cfg.validate();
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception& e) {
            throw ConfigError(std::string("invalid degradation config: ") + e.what());
        }
    }
    std::vector<fs::path> sources;
    if (!a.hq_dir.empty()) {
        if (!fs::is_directory(a.hq_dir)) throw ConfigError("not a directory: " + a.hq_dir);
        sources = png_inputs(a.hq_dir);
        if (sources.empty()) throw ConfigError("no PNG files in " + a.hq_dir);
    }
    int written = 0;
    if (a.procedural > 0) {
        for (int i = 0; i < a.procedural; ++i) {
            Rng rng(derive_seed(a.seed, static_cast<std::uint64_t>(i)));
            const TextureSpec spec = sample_texture(rng);
            const Image src = render_texture(spec, a.crop + a.crop / 4);
            write_pair(a.out, "tex" + std::to_string(i), make_pair(src, a.crop, rng, cfg));
            ++written;
        }
    } else {
        for (std::size_t i = 0; i < sources.size(); ++i) {
            Rng rng(derive_seed(a.seed, i));
            write_pair(a.out, sources[i].stem().string(), make_pair(load_png(sources[i]), a.crop, rng, cfg));
            ++written;
        }
    }
    log_line("wrote " + std::to_string(written) + " pairs to " + a.out);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Toy-scale diffusion restoration and data curation"};
    app.require_subcommand(1);

    DegradeArgs dg;
    auto* degrade = app.add_subcommand("degrade", "Build HQ/LQ training pairs");
    degrade->add_option("--config", dg.config, "Degradation config JSON");
    degrade->add_option("--hq-dir", dg.hq_dir, "Folder of HQ PNG sources");
    degrade->add_option("--procedural", dg.procedural, "Number of procedural texture sources instead");
    degrade->add_option("--out", dg.out, "Output folder");
    degrade->add_option("--crop", dg.crop, "HQ crop side");
    degrade->add_option("--seed", dg.seed, "Seed");

    std::string pre_config, pre_pairs, pre_out;
    std::optional<int> pre_steps, pre_max_pairs;
    std::optional<std::uint64_t> pre_seed;
    auto* pre = app.add_subcommand("pretrain", "Train the degradation remover and text-to-image backbone");
    pre->add_option("--config", pre_config, "Pretrain config JSON");
    pre->add_option("--pairs", pre_pairs, "Pair folder from `degrade`");
    pre->add_option("--out", pre_out, "Output bundle checkpoint");
    pre->add_option("--steps", pre_steps, "Backbone steps");
    pre->add_option("--max-pairs", pre_max_pairs, "Use only the first N pairs");
    pre->add_option("--seed", pre_seed, "Seed");

    std::string tr_config, tr_init, tr_pairs, tr_out;
    std::optional<int> tr_steps, tr_batch, tr_max_pairs;
    std::optional<double> tr_lr;
    std::optional<std::uint64_t> tr_seed;
    bool tr_resume = false;
    auto* train = app.add_subcommand("train-restore", "Train the control branch");
    train->add_option("--config", tr_config, "Training config JSON");
    train->add_option("--init", tr_init, "Bundle checkpoint from `pretrain`");
    train->add_option("--pairs", tr_pairs, "Pair folder");
    train->add_option("--out", tr_out, "Run folder");
    train->add_option("--steps", tr_steps, "Optimizer steps");
    train->add_option("--batch", tr_batch, "Batch size");
    train->add_option("--lr", tr_lr, "Learning rate");
    train->add_option("--max-pairs", tr_max_pairs, "Use only the first N pairs");
    train->add_option("--seed", tr_seed, "Seed");
    train->add_flag("--resume", tr_resume, "Continue from <out>/latest.ckpt");

    std::string tp_config, tp_out, tp_base;
    std::optional<int> tp_base_steps, tp_finetune_steps;
    std::optional<std::uint64_t> tp_seed;
    auto* prompts = app.add_subcommand("train-prompts", "Learn positive/negative prompt tokens and the classifier");
    prompts->add_option("--config", tp_config, "Prompt training config JSON");
    prompts->add_option("--out", tp_out, "Output folder");
    prompts->add_option("--base", tp_base, "Existing base checkpoint (skips base training)");
    prompts->add_option("--base-steps", tp_base_steps, "Base text-to-image steps");
    prompts->add_option("--finetune-steps", tp_finetune_steps, "Dual-prompt fine-tuning steps");
    prompts->add_option("--seed", tp_seed, "Seed");

    std::string cu_model, cu_classifier, cu_out, cu_scenes, cu_stub, cu_host, cu_path = "/v1/screen";
    int cu_count = 100, cu_port = 0, cu_steps = 50;
    std::optional<double> cu_threshold, cu_omega;
    std::uint64_t cu_seed = 0;
    auto* curate_cmd = app.add_subcommand("curate", "Generate, score and screen candidates");
    curate_cmd->add_option("--model", cu_model, "genir.ckpt from `train-prompts`")->required();
    curate_cmd->add_option("--classifier", cu_classifier, "classifier.json from `train-prompts`")->required();
    curate_cmd->add_option("--out", cu_out, "Output folder")->required();
    curate_cmd->add_option("--count", cu_count, "Number of candidates");
    curate_cmd->add_option("--scenes", cu_scenes, "Text file with one scene caption per line");
    curate_cmd->add_option("--threshold", cu_threshold, "Classifier threshold");
    curate_cmd->add_option("--omega", cu_omega, "Guidance scale");
    curate_cmd->add_option("--steps", cu_steps, "Sampling steps");
    curate_cmd->add_option("--seed", cu_seed, "Seed");
    curate_cmd->add_option("--mllm-stub", cu_stub, "Offline verdict file");
    curate_cmd->add_option("--mllm-host", cu_host, "Screening service host");
    curate_cmd->add_option("--mllm-port", cu_port, "Screening service port");
    curate_cmd->add_option("--mllm-path", cu_path, "Screening service path");

    std::string rs_in, rs_ckpt, rs_out;
    double rs_omega = 4.5;
    int rs_steps = 50;
    std::uint64_t rs_seed = 0;
    auto* restore = app.add_subcommand("restore", "Restore one LQ image or a folder of them");
    restore->add_option("--in", rs_in, "LQ PNG or folder")->required();
    restore->add_option("--ckpt", rs_ckpt, "Trained checkpoint")->required();
    restore->add_option("--out", rs_out, "Output PNG or folder")->required();
    restore->add_option("--omega", rs_omega, "Guidance scale");
    restore->add_option("--steps", rs_steps, "Sampling steps");
    restore->add_option("--seed", rs_seed, "Seed");

    std::string ev_pred, ev_gt, ev_out;
    auto* eval = app.add_subcommand("eval", "PSNR / SSIM-Y report for matching PNG names");
    eval->add_option("--pred", ev_pred, "Prediction folder")->required();
    eval->add_option("--gt", ev_gt, "Ground-truth folder")->required();
    eval->add_option("--out", ev_out, "Report path (default stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*degrade) return run_degrade(dg);

        if (*pre) {
            const auto cfg = load_config<PretrainConfig>(pre_config, [&](json& j) {
                if (!pre_pairs.empty()) j["pairs_dir"] = pre_pairs;
                if (!pre_out.empty()) j["out_checkpoint"] = pre_out;
                set_if(j, "max_pairs", pre_max_pairs);
                if (pre_steps) j["loop"]["steps"] = *pre_steps;
                if (pre_seed) j["loop"]["seed"] = *pre_seed;
            });
            const auto pairs = load_pairs(cfg.pairs_dir, cfg.max_pairs);
            pretrain(cfg, pairs, log_line);
            return 0;
        }

        if (*train) {
            const auto cfg = load_config<TrainRestoreConfig>(tr_config, [&](json& j) {
                if (!tr_init.empty()) j["init_checkpoint"] = tr_init;
                if (!tr_pairs.empty()) j["pairs_dir"] = tr_pairs;
                if (!tr_out.empty()) j["out_dir"] = tr_out;
                set_if(j, "max_pairs", tr_max_pairs);
                if (tr_steps) j["loop"]["steps"] = *tr_steps;
                if (tr_batch) j["loop"]["batch"] = *tr_batch;
                if (tr_seed) j["loop"]["seed"] = *tr_seed;
                if (tr_lr) j["loop"]["optim"]["lr"] = *tr_lr;
                if (tr_resume) j["resume"] = true;
            });
            const auto result = train_restoration(cfg, log_line);
            if (!result.losses.empty()) log_line("final loss " + std::to_string(result.losses.back().second));
            return 0;
        }

        if (*prompts) {
            const auto cfg = load_config<PromptTrainConfig>(tp_config, [&](json& j) {
                if (!tp_out.empty()) j["out_dir"] = tp_out;
                if (!tp_base.empty()) j["base_checkpoint"] = tp_base;
                set_if(j, "base_steps", tp_base_steps);
                set_if(j, "finetune_steps", tp_finetune_steps);
                set_if(j, "seed", tp_seed);
            });
            if (!cfg.base_checkpoint.empty()) require_file(cfg.base_checkpoint, "base checkpoint");
            train_prompts(cfg, log_line);
            return 0;
        }

        if (*curate_cmd) {
            require_file(cu_model, "model checkpoint");
            require_file(cu_classifier, "classifier");
            if (cu_count < 0) throw ConfigError("--count must be non-negative");
            if (cu_stub.empty() == cu_host.empty()) throw ConfigError("give exactly one of --mllm-stub or --mllm-host");
            std::unique_ptr<MllmClient> client;
            if (!cu_stub.empty()) {
                require_file(cu_stub, "MLLM stub file");
                client = std::make_unique<StubMllmClient>(StubMllmClient::from_file(cu_stub));
            } else {
                if (cu_port <= 0) throw ConfigError("--mllm-port is required with --mllm-host");
                client = std::make_unique<HttpMllmClient>(cu_host, cu_port, cu_path);
            }
            std::vector<std::string> scenes;
            if (!cu_scenes.empty()) {
                require_file(cu_scenes, "scene file");
                std::ifstream in(cu_scenes);
                for (std::string line; std::getline(in, line);) {
                    if (!line.empty()) scenes.push_back(line);
                }
                if (scenes.empty()) throw ConfigError("scene file is empty");
            } else {
                scenes = toy_scenes(std::max(cu_count, 1), derive_seed(cu_seed, 1));
            }
            const GenIRModel model = load_genir(cu_model);
            const QualityClassifier clf = QualityClassifier::from_json(read_json_file(cu_classifier));
            CurateConfig cc;
            cc.out_dir = cu_out;
            cc.count = cu_count;
            cc.threshold = cu_threshold.value_or(model.config().threshold);
            const GuidanceConfig base_guidance{cu_omega.value_or(model.config().curate_omega), cu_steps, cu_seed};
            base_guidance.validate(model.schedule());
            auto generate = [&](int i) {
                const std::string& scene = scenes[static_cast<std::size_t>(i) % scenes.size()];
                GuidanceConfig g = base_guidance;
                g.seed = derive_seed(cu_seed, static_cast<std::uint64_t>(i) + 2);
                return Candidate{scene, generate_candidates(model, {scene}, g).front()};
            };
            const auto summary =
                curate(cc, generate, [&](const Image& img) { return clf.score(img); }, *client);
            std::cout << json{{"total", summary.total},
                              {"above_threshold", summary.above_threshold},
                              {"kept", summary.kept},
                              {"resumed", summary.resumed}}
                             .dump()
                      << '\n';
            return 0;
        }

        if (*restore) {
            require_file(rs_ckpt, "checkpoint");
            const auto inputs = png_inputs(rs_in);
            const RestorationModel model = model_from_checkpoint(load_checkpoint(rs_ckpt));
            GuidanceConfig g{rs_omega, rs_steps, rs_seed};
            try {
                g.validate(model.schedule());
            } catch (const std::exception& e) {
                throw ConfigError(e.what());
            }
            const bool batch = fs::is_directory(rs_in);
            for (std::size_t i = 0; i < inputs.size(); ++i) {
                GuidanceConfig gi = g;
                if (batch) gi.seed = derive_seed(rs_seed, i);
                const Image out = model.restore(load_png(inputs[i]), gi);
                save_png(out, batch ? fs::path(rs_out) / inputs[i].filename() : fs::path(rs_out));
            }
            return 0;
        }

        if (*eval) {
            const auto report = evaluate(ev_pred, ev_gt);
            for (const auto& w : report.warnings) log_line("warning: " + w);
            const std::string text = to_json(report).dump(2);
            if (ev_out.empty()) {
                std::cout << text << '\n';
            } else {
                std::ofstream out(ev_out);
                out << text << '\n';
                if (!out) throw std::runtime_error("cannot write " + ev_out);
            }
            return 0;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}
