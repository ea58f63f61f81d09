#include "dreamclear/harness.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <set>

#include "dreamclear/textures.hpp"

namespace dreamclear {

namespace {

void emit(const std::function<void(const std::string&)>& log, const std::string& msg) {
    if (log) log(msg);
}

std::string timestamp() {
    const auto now = std::chrono::system_clock::now();
    return std::to_string(std::chrono::duration_cast<std::chrono::seconds>(now.time_since_epoch()).count());
}

void require_path(const std::string& p, const char* what) {
    if (p.empty()) throw ConfigError(std::string(what) + " is not set");
    if (!std::filesystem::exists(p)) throw ConfigError(std::string(what) + " does not exist: " + p);
}

}  // namespace

void to_json(nlohmann::json& j, const AdamWConfig& c) {
    j = nlohmann::json{{"kind", "adamw"},
                       {"lr", c.lr},
                       {"betas", {c.beta1, c.beta2}},
                       {"eps", c.eps},
                       {"weight_decay", c.weight_decay},
                       {"max_grad_norm", c.max_grad_norm}};
}

void from_json(const nlohmann::json& j, AdamWConfig& c) {
    if (j.contains("kind") && j.at("kind").get<std::string>() != "adamw") {
        throw ConfigError("only the adamw optimizer is supported");
    }
    c.lr = j.value("lr", c.lr);
    if (j.contains("betas")) {
        c.beta1 = j.at("betas").at(0).get<double>();
        c.beta2 = j.at("betas").at(1).get<double>();
    }
    c.eps = j.value("eps", c.eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.max_grad_norm = j.value("max_grad_norm", c.max_grad_norm);
}

void ExperimentManifest::append(nlohmann::json record) const {
    if (!record.is_object() || !record.contains("event")) throw std::invalid_argument("manifest records need an event field");
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    std::ofstream out(path_, std::ios::app);
    if (!out) throw std::runtime_error("cannot append to manifest " + path_.string());
    out << record.dump() << '\n';
    out.flush();
}

std::vector<nlohmann::json> ExperimentManifest::read() const {
    std::vector<nlohmann::json> out;
    std::ifstream in(path_);
    if (!in) return out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) out.push_back(nlohmann::json::parse(line));
    }
    return out;
}

std::vector<std::pair<int, double>> ExperimentManifest::loss_curve() const {
    std::vector<std::pair<int, double>> out;
    for (const auto& r : read()) {
        if (r.value("event", "") == "loss") out.emplace_back(r.at("step").get<int>(), r.at("loss").get<double>());
    }
    return out;
}

std::vector<TrainingPair> load_pairs(const std::filesystem::path& dir, int limit) {
    const auto records = read_pair_manifest(dir / "pairs.jsonl");
    std::vector<TrainingPair> out;
    for (const auto& r : records) {
        if (limit > 0 && static_cast<int>(out.size()) >= limit) break;
        TrainingPair p;
        p.name = std::filesystem::path(r.hq_path).stem().string();
        p.hq = load_png(dir / r.hq_path);
        p.lq = load_png(dir / r.lq_path);
        out.push_back(std::move(p));
    }
    if (out.empty()) throw std::runtime_error("no pairs found in " + dir.string());
    return out;
}

std::vector<TrainingPair> procedural_pairs(int count, int crop, std::uint64_t seed, const DegradationConfig& config,
                                           std::uint64_t first_index, double min_frequency, double max_frequency) {
    std::vector<TrainingPair> out;
    for (int i = 0; i < count; ++i) {
        const std::uint64_t index = first_index + static_cast<std::uint64_t>(i);
        Rng rng(derive_seed(seed, index));
        const TextureSpec spec = sample_texture(rng, min_frequency, max_frequency);
        const Image source = render_texture(spec, crop + crop / 4);
        DegradedPair pair = make_pair(source, crop, rng, config);
        TrainingPair p;
        p.name = "tex" + std::to_string(index);
        p.hq = std::move(pair.hq);
        p.lq = std::move(pair.lq);
        p.caption = texture_caption(spec);
        out.push_back(std::move(p));
    }
    return out;
}

void to_json(nlohmann::json& j, const LoopConfig& c) {
    j = nlohmann::json{{"steps", c.steps},
                       {"batch", c.batch},
                       {"optimizer", c.optim},
                       {"seed", c.seed},
                       {"caption_dropout", c.caption_dropout}};
}

void from_json(const nlohmann::json& j, LoopConfig& c) {
    c.steps = j.value("steps", c.steps);
    c.batch = j.value("batch", c.batch);
    if (j.contains("optimizer")) c.optim = j.at("optimizer").get<AdamWConfig>();
    c.seed = j.value("seed", c.seed);
    c.caption_dropout = j.value("caption_dropout", c.caption_dropout);
    if (c.steps < 0 || c.batch < 1) throw ConfigError("steps must be >= 0 and batch >= 1");
    if (!(c.optim.lr > 0.0)) throw ConfigError("learning rate must be positive");
}

Trainer::Trainer(RestorationModel& model, std::vector<TrainingPair> pairs, LoopConfig config, Target target)
    : model_(model),
      pairs_(std::move(pairs)),
      config_(config),
      target_(target),
      optimizer_(config.optim),
      sched_(model.schedule()),
      empty_text_(model.caption_tokens("")) {
    if (pairs_.empty()) throw std::invalid_argument("training needs at least one pair");
    if (target_ == Target::backbone) {
        model_.store().set_trainable({"backbone.", "text."});
    } else {
        std::vector<std::string> prefixes{"control."};
        if (model_.config().train_remover_jointly && model_.conv_remover()) prefixes.emplace_back("remover.");
        model_.store().set_trainable(prefixes);
    }
    const int side = model_.config().hq_side();
    ag::NoGradGuard no_grad;
    for (const auto& p : pairs_) {
        if (p.hq.width != side || p.hq.height != side) {
            throw std::invalid_argument("pair " + p.name + " HQ side differs from the model side " + std::to_string(side));
        }
        Cached c;
        if (target_ == Target::control) c.branch = model_.branch_images(p.lq);
        c.z0 = model_.config().codec.encode(p.hq);
        cache_.push_back(std::move(c));
    }
}

ag::Var<float> Trainer::item_loss(std::size_t index, Rng& rng, bool drop_caption) const {
    const auto& item = cache_[index];
    const TextTokens<float> text = drop_caption ? empty_text_ : model_.prompt_tokens(false);
    if (target_ == Target::backbone) {
        auto fn = [&](const Matf& z, int t, const TextTokens<float>& txt) {
            return model_.predict(z, t, txt, nullptr);
        };
        return diffusion_loss<float>(fn, item.z0, text, sched_, rng);
    }
    ControlCondition<float> cond;
    ag::Var<float> remover_loss;
    if (model_.config().train_remover_jointly && model_.conv_remover()) {
        const auto& codec = model_.config().codec;
        const auto ref = ag::clamp<float>(model_.conv_remover()->forward(pairs_[index].lq), 0.0f, 1.0f);
        remover_loss = ag::mse<float>(ref, pairs_[index].hq.to_mat());
        const auto ref_latent = ag::add<float>(ag::scale<float>(ref, static_cast<float>(codec.scale)),
                                               ag::constant<float>(Matf::Constant(1, 1, static_cast<float>(codec.shift))));
        const auto x_lq = model_.control().encode_lq(ag::constant<float>(codec.encode(item.branch.lq_up)));
        cond = model_.control().prepare_condition(x_lq, model_.control().encode_ref(ref_latent));
    } else {
        cond = model_.condition(item.branch);
    }
    auto fn = [&](const Matf& z, int t, const TextTokens<float>& txt) { return model_.predict(z, t, txt, &cond); };
    auto loss = diffusion_loss<float>(fn, item.z0, text, sched_, rng);
    return remover_loss ? ag::add<float>(loss, remover_loss) : loss;
}

double Trainer::step() {
    Rng rng(derive_seed(config_.seed, static_cast<std::uint64_t>(step_)));
    model_.store().zero_grad();
    double total = 0.0;
    const float inv_batch = 1.0f / static_cast<float>(config_.batch);
    for (int b = 0; b < config_.batch; ++b) {
        const auto index = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pairs_.size()) - 1));
        const bool drop = rng.uniform() < config_.caption_dropout;
        const auto loss = item_loss(index, rng, drop);
        total += loss->value(0, 0);
        ag::backward<float>(ag::scale<float>(loss, inv_batch));
    }
    optimizer_.step(model_.store());
    ++step_;
    return total / config_.batch;
}

double Trainer::eval_loss(int draws, std::uint64_t seed) const {
    ag::NoGradGuard no_grad;
    Rng rng(seed);
    double total = 0.0;
    for (int i = 0; i < draws; ++i) {
        const auto index = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pairs_.size()) - 1));
        total += item_loss(index, rng, false)->value(0, 0);
    }
    return total / draws;
}

Checkpoint Trainer::snapshot(const nlohmann::json& config_json) const {
    Checkpoint ckpt = model_checkpoint(model_);
    ckpt.config["train"] = config_json;
    ckpt.config["step"] = step_;
    ckpt.config["optimizer_steps"] = optimizer_.steps_taken();
    for (auto& [name, value] : optimizer_.export_state()) ckpt.tensors.push_back({"optim/" + name, value});
    return ckpt;
}

void Trainer::restore_state(const Checkpoint& ckpt) {
    step_ = ckpt.config.at("step").get<int>();
    std::vector<std::pair<std::string, Matf>> state;
    for (const auto& t : ckpt.tensors) {
        if (t.name.rfind("optim/", 0) == 0) state.emplace_back(t.name.substr(6), t.value);
    }
    optimizer_.import_state(state, ckpt.config.at("optimizer_steps").get<std::int64_t>());
}

RestorationModel with_fresh_control(const RestorationModel& model, std::uint64_t seed) {
    ParamStore<float> store = store_from_tensors(export_params(model.store()), "control.");
    Rng rng(seed);
    const auto backbone = Backbone<float>::bind(store, "backbone", model.config().backbone);
    ControlBranch<float>::init_from_backbone(store, "control", backbone, model.config().num_experts, rng);
    return RestorationModel::bind(model.config(), std::move(store));
}

Checkpoint model_checkpoint(const RestorationModel& model) {
    Checkpoint ckpt;
    ckpt.config["model"] = model.config();
    ckpt.tensors = export_params(model.store());
    return ckpt;
}

RestorationModel model_from_checkpoint(const Checkpoint& ckpt) {
    if (!ckpt.config.contains("model")) throw std::runtime_error("checkpoint has no model config");
    const auto cfg = ckpt.config.at("model").get<RestorationConfig>();
    return RestorationModel::bind(cfg, store_from_tensors(ckpt.tensors, "optim/"));
}

void PretrainConfig::validate() const {
    model.validate();
    if (out_checkpoint.empty()) throw ConfigError("pretrain: out_checkpoint is not set");
    if (!(loop.optim.lr > 0.0)) throw ConfigError("pretrain: learning rate must be positive");
}

void to_json(nlohmann::json& j, const PretrainConfig& c) {
    j = nlohmann::json{{"model", c.model},
                       {"pairs_dir", c.pairs_dir},
                       {"max_pairs", c.max_pairs},
                       {"loop", c.loop},
                       {"remover_steps", c.remover_steps},
                       {"remover_lr", c.remover_lr},
                       {"out_checkpoint", c.out_checkpoint},
                       {"manifest", c.manifest}};
}

void from_json(const nlohmann::json& j, PretrainConfig& c) {
    if (j.contains("model")) c.model = j.at("model").get<RestorationConfig>();
    c.pairs_dir = j.value("pairs_dir", c.pairs_dir);
    c.max_pairs = j.value("max_pairs", c.max_pairs);
    if (j.contains("loop")) c.loop = j.at("loop").get<LoopConfig>();
    c.remover_steps = j.value("remover_steps", c.remover_steps);
    c.remover_lr = j.value("remover_lr", c.remover_lr);
    c.out_checkpoint = j.value("out_checkpoint", c.out_checkpoint);
    c.manifest = j.value("manifest", c.manifest);
}

void pretrain(const PretrainConfig& config, const std::vector<TrainingPair>& pairs,
              const std::function<void(const std::string&)>& log) {
    config.validate();
    std::optional<ExperimentManifest> manifest;
    if (!config.manifest.empty()) {
        manifest.emplace(config.manifest);
        manifest->append({{"event", "start"},
                          {"command", "pretrain"},
                          {"config", config},
                          {"version", kCodeVersion},
                          {"seed", config.loop.seed},
                          {"time", timestamp()}});
    }
    RestorationModel model = RestorationModel::create(config.model, config.loop.seed);
    if (model.conv_remover() && config.remover_steps > 0) {
        std::vector<std::pair<Image, Image>> rp;
        for (const auto& p : pairs) rp.emplace_back(p.lq, p.hq);
        auto remover = *model.conv_remover();
        const auto rep = train_remover(remover, model.store(), "remover", rp, config.remover_steps, config.remover_lr,
                                       derive_seed(config.loop.seed, 1));
        emit(log, "remover mse " + std::to_string(rep.initial_mse) + " -> " + std::to_string(rep.final_mse));
        if (manifest) {
            manifest->append({{"event", "remover"}, {"initial_mse", rep.initial_mse}, {"final_mse", rep.final_mse}});
        }
    }
    LoopConfig loop = config.loop;
    loop.seed = derive_seed(config.loop.seed, 2);
    Trainer trainer(model, pairs, loop, Trainer::Target::backbone);
    for (int s = 0; s < loop.steps; ++s) {
        const double loss = trainer.step();
        if (s % 50 == 0 || s + 1 == loop.steps) {
            emit(log, "pretrain step " + std::to_string(s) + " loss " + std::to_string(loss));
            if (manifest) manifest->append({{"event", "loss"}, {"step", s}, {"loss", loss}});
        }
    }
    RestorationModel bundle = with_fresh_control(model, derive_seed(config.loop.seed, 3));
    Checkpoint ckpt = model_checkpoint(bundle);
    ckpt.config["pretrain"] = config;
    save_checkpoint(config.out_checkpoint, ckpt);
    if (manifest) manifest->append({{"event", "checkpoint"}, {"path", config.out_checkpoint}, {"time", timestamp()}});
}

void TrainRestoreConfig::validate() const {
    require_path(init_checkpoint, "init_checkpoint");
    require_path(pairs_dir, "pairs_dir");
    if (out_dir.empty()) throw ConfigError("out_dir is not set");
    if (!(loop.optim.lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (checkpoint_every < 1 || log_every < 1) throw ConfigError("checkpoint_every and log_every must be >= 1");
}

void to_json(nlohmann::json& j, const TrainRestoreConfig& c) {
    j = nlohmann::json{{"init_checkpoint", c.init_checkpoint},
                       {"pairs_dir", c.pairs_dir},
                       {"max_pairs", c.max_pairs},
                       {"loop", c.loop},
                       {"out_dir", c.out_dir},
                       {"checkpoint_every", c.checkpoint_every},
                       {"log_every", c.log_every},
                       {"resume", c.resume}};
}

void from_json(const nlohmann::json& j, TrainRestoreConfig& c) {
    c.init_checkpoint = j.value("init_checkpoint", c.init_checkpoint);
    c.pairs_dir = j.value("pairs_dir", c.pairs_dir);
    c.max_pairs = j.value("max_pairs", c.max_pairs);
    if (j.contains("loop")) c.loop = j.at("loop").get<LoopConfig>();
    c.out_dir = j.value("out_dir", c.out_dir);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.log_every = j.value("log_every", c.log_every);
    c.resume = j.value("resume", c.resume);
}

TrainRestoreResult train_restoration(const TrainRestoreConfig& config,
                                     const std::function<void(const std::string&)>& log) {
    config.validate();
    const std::filesystem::path out_dir(config.out_dir);
    const std::filesystem::path latest = out_dir / "latest.ckpt";
    const bool resuming = config.resume && std::filesystem::exists(latest);
    ExperimentManifest manifest(out_dir / "manifest.jsonl");
    manifest.append({{"event", resuming ? "resume" : "start"},
                     {"command", "train-restore"},
                     {"config", config},
                     {"version", kCodeVersion},
                     {"seed", config.loop.seed},
                     {"time", timestamp()}});

    const Checkpoint init = load_checkpoint(resuming ? latest : std::filesystem::path(config.init_checkpoint));
    RestorationModel model = model_from_checkpoint(init);
    auto pairs = load_pairs(config.pairs_dir, config.max_pairs);
    Trainer trainer(model, std::move(pairs), config.loop, Trainer::Target::control);
    if (resuming) {
        trainer.restore_state(init);
        emit(log, "resumed at step " + std::to_string(trainer.next_step()));
    }

    TrainRestoreResult result;
    const nlohmann::json cfg_json = config;
    while (trainer.next_step() < config.loop.steps) {
        const int s = trainer.next_step();
        const double loss = trainer.step();
        result.losses.emplace_back(s, loss);
        if (s % config.log_every == 0 || s + 1 == config.loop.steps) {
            manifest.append({{"event", "loss"}, {"step", s}, {"loss", loss}});
            emit(log, "step " + std::to_string(s) + " loss " + std::to_string(loss));
        }
        const int done = trainer.next_step();
        if (done % config.checkpoint_every == 0 || done == config.loop.steps) {
            const Checkpoint ckpt = trainer.snapshot(cfg_json);
            const auto path = out_dir / ("ckpt_" + std::to_string(done) + ".ckpt");
            save_checkpoint(path, ckpt);
            save_checkpoint(latest, ckpt);
            result.checkpoints.push_back(path.string());
            manifest.append({{"event", "checkpoint"}, {"step", done}, {"path", path.string()}, {"time", timestamp()}});
        }
    }
    manifest.append({{"event", "end"}, {"time", timestamp()}});
    return result;
}

MetricsReport evaluate(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir,
                       const MetricRegistry* external) {
    auto list = [](const std::filesystem::path& dir) {
        std::set<std::string> names;
        if (!std::filesystem::is_directory(dir)) throw ConfigError("not a directory: " + dir.string());
        for (const auto& e : std::filesystem::directory_iterator(dir)) {
            if (e.is_regular_file() && e.path().extension() == ".png") names.insert(e.path().filename().string());
        }
        return names;
    };
    const auto pred = list(pred_dir);
    const auto gt = list(gt_dir);
    MetricsReport report;
    for (const auto& name : pred) {
        if (!gt.count(name)) {
            report.warnings.push_back("no ground truth for " + name);
            continue;
        }
        const Image p = load_png(pred_dir / name);
        const Image g = load_png(gt_dir / name);
        if (!p.same_shape(g)) {
            report.warnings.push_back("shape mismatch for " + name);
            continue;
        }
        report.images.push_back(score_image(name, p, g, external));
    }
    for (const auto& name : gt) {
        if (!pred.count(name)) report.warnings.push_back("no prediction for " + name);
    }
    return report;
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("invalid JSON in " + path.string() + ": " + e.what());
    }
}

}  // namespace dreamclear
