// Runs the thirteen acceptance criteria and prints one PASS/FAIL line each.
// Usage: dreamclear_acceptance [criterion numbers...]   (default: all)

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include "dreamclear/controlformer.hpp"
#include "dreamclear/degrade.hpp"
#include "dreamclear/genir.hpp"
#include "dreamclear/harness.hpp"
#include "dreamclear/metrics.hpp"
#include "dreamclear/moam.hpp"
#include "dreamclear/schedule.hpp"
#include "genir_fixtures.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace dreamclear;
using namespace dreamclear::testing;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, a, b, c, d);
    return buf;
}

template <typename T>
TokenGrid<T> row_grid(const Mat<T>& m) {
    return {ag::constant<T>(m), 1, static_cast<int>(m.rows())};
}

// ---------------------------------------------------------------- 1

Outcome zero_init_identity() {
    RestorationModel m = RestorationModel::create(RestorationConfig{}, 1);
    Rng rng(1);
    for (const auto& [name, p] : m.store().entries()) {
        if (name.rfind("backbone.", 0) == 0) p->value = rng.normal_matrix<float>(p->rows(), p->cols()) * 0.2f;
    }
    m = with_fresh_control(m, 2);
    const int side = m.config().hq_side(), lq = m.config().lq_side(), ch = m.config().backbone.latent_channels;
    double worst = 0.0;
    for (int i = 0; i < 10; ++i) {
        const Matf z = rng.normal_matrix<float>(static_cast<Eigen::Index>(side) * side, ch);
        const auto cond = m.condition(random_image(lq, lq, 3, rng));
        const int t = static_cast<int>(rng.uniform_int(0, m.config().diffusion_steps - 1));
        const auto text = m.prompt_tokens(i % 2 == 1);
        const Matf a = m.predict(z, t, text, &cond)->value;
        const Matf b = m.predict(z, t, text, nullptr)->value;
        worst = std::max(worst, static_cast<double>((a - b).cwiseAbs().maxCoeff()));
    }
    return {worst <= 1e-6, fmt("max |diff| %.3g over 10 inputs", worst)};
}

// ---------------------------------------------------------------- 2

Outcome router_simplex() {
    ParamStore<double> store;
    Rng rng(2);
    double worst_sum = 0.0, min_entry = 1.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int c = 2 + trial % 7, k = 1 + trial % 4, n = 1 + trial % 9;
        const auto p = MoamParams<double>::create(store, "m" + std::to_string(trial), c, 1, k, rng);
        RouterParams<double> r = p.router;
        r.out.weight->value = rng.normal_matrix<double>(r.out.weight->rows(), r.out.weight->cols()) * 3.0;
        r.out.bias->value = rng.normal_matrix<double>(1, k);
        const DegradationMap<double> d{ag::constant<double>(rng.normal_matrix<double>(n, c) * 2.0)};
        const Matd w = route<double>(d, r).w->value;
        for (Eigen::Index i = 0; i < w.rows(); ++i) worst_sum = std::max(worst_sum, std::abs(w.row(i).sum() - 1.0));
        min_entry = std::min(min_entry, w.minCoeff());
    }
    return {worst_sum <= 1e-6 && min_entry >= 0.0,
            fmt("max |row sum - 1| %.3g, min entry %.3g over 1000 maps", worst_sum, min_entry)};
}

// ---------------------------------------------------------------- 3

Outcome modulation_oracles() {
    Rng rng(3);
    double worst = 0.0, worst_k1 = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 1 + static_cast<int>(rng.uniform_int(0, 7));
        const int c = 1 + static_cast<int>(rng.uniform_int(0, 7));
        const int k = 1 + static_cast<int>(rng.uniform_int(0, 3));
        ParamStore<double> store;
        ExpertParams<double> ex;
        for (int e = 0; e < k; ++e) {
            ex.gamma.emplace_back(store, "g" + std::to_string(e), c, c, Init::normal, rng);
            ex.beta.emplace_back(store, "b" + std::to_string(e), c, c, Init::normal, rng);
        }
        randomize(store, rng, 1.0);
        const Matd x = rng.normal_matrix<double>(n, c);
        Matd w = rng.normal_matrix<double>(n, k).array().exp();
        for (int i = 0; i < n; ++i) w.row(i) /= w.row(i).sum();
        const auto [g, b] = expert_modulation<double>(row_grid(x), {ag::constant<double>(w)}, ex);
        worst = std::max(worst, (g->value - expert_sum_oracle(x, w, ex.gamma)).cwiseAbs().maxCoeff());
        worst = std::max(worst, (b->value - expert_sum_oracle(x, w, ex.beta)).cwiseAbs().maxCoeff());

        const Matd xin = rng.normal_matrix<double>(n, c);
        const Matd out = modulate<double>(row_grid(xin), g, b).tokens->value;
        worst = std::max(worst, (out - modulate_oracle(xin, g->value, b->value)).cwiseAbs().maxCoeff());

        ExpertParams<double> single;
        single.gamma.push_back(ex.gamma[0]);
        single.beta.push_back(ex.beta[0]);
        const auto [g1, b1] = expert_modulation<double>(row_grid(x), {ag::constant<double>(Matd::Ones(n, 1))}, single);
        worst_k1 = std::max(worst_k1, (g1->value - ex.gamma[0](ag::constant<double>(x))->value).cwiseAbs().maxCoeff());
        worst_k1 = std::max(worst_k1, (b1->value - ex.beta[0](ag::constant<double>(x))->value).cwiseAbs().maxCoeff());
    }
    return {worst <= 1e-6 && worst_k1 <= 1e-7, fmt("max error %.3g, K=1 collapse %.3g", worst, worst_k1)};
}

// ---------------------------------------------------------------- 4

Outcome cfg_contract() {
    Matd pos(1, 1), neg(1, 1);
    pos << 2.0;
    neg << 0.0;
    const double v = cfg_combine<double>(pos, neg, 4.5)(0, 0);
    Rng rng(4);
    const Matd a = rng.normal_matrix<double>(5, 3), b = rng.normal_matrix<double>(5, 3);
    const bool one = bitwise_equal<double>(cfg_combine<double>(a, b, 1.0), a);
    const bool zero = bitwise_equal<double>(cfg_combine<double>(a, b, 0.0), b);
    return {v == 9.0 && one && zero, fmt("(2, 0, 4.5) -> %.17g; omega 1 bitwise %g, omega 0 bitwise %g", v, one, zero)};
}

// ---------------------------------------------------------------- 5

Outcome gradient_checks() {
    const BackboneConfig cfg{8, 2, 2, 16, 2, 4, 8, 4, 2, 16};
    ParamStore<double> store;
    Rng rng(5);
    const auto bb = Backbone<double>::create(store, "backbone", cfg, rng);
    const auto ctl = ControlBranch<double>::init_from_backbone(store, "control", bb, 3, rng);
    randomize(store, rng, 0.25);
    const auto sched = make_schedule(100, ScheduleKind::cosine);
    const Matd z0 = rng.normal_matrix<double>(64, 2), eps = rng.normal_matrix<double>(64, 2);
    const Matd lq = rng.normal_matrix<double>(64, 2), ref = rng.normal_matrix<double>(64, 2);
    const TextTokens<double> text{ag::constant<double>(rng.normal_matrix<double>(3, 8)), {1, 1, 0}};
    auto model = [&](const Matd& zt, int t, int) {
        const auto cond = ctl.prepare_condition(ctl.encode_lq(ag::constant<double>(lq)),
                                                ctl.encode_ref(ag::constant<double>(ref)));
        return controlled_forward<double>(bb, ctl, ag::constant<double>(zt), t, text, &cond);
    };
    std::vector<ag::Var<double>> params;
    for (const auto& [n, v] : store.entries()) params.push_back(v);
    const auto r = gradient_check(params, [&] { return diffusion_loss_at<double>(model, z0, 0, 30, eps, sched); }, 100,
                                  rng);
    return {r.checked == 100 && r.max_rel_error <= 1e-3,
            fmt("max relative error %.3g over %g coordinates", r.max_rel_error, r.checked)};
}

// ---------------------------------------------------------------- 6

Outcome sampler_sanity() {
    const Eigen::RowVector2d mean(1.0, -0.5), sd(0.5, 0.3);
    const int freq = 16;
    ParamStore<double> store;
    Rng rng(6);
    const Linear<double> l1(store, "l1", 2 + freq, 64, Init::xavier, rng);
    const Linear<double> l2(store, "l2", 64, 64, Init::xavier, rng);
    const Linear<double> l3(store, "l3", 64, 2, Init::xavier, rng);
    auto net = [&](const Matd& z, const std::vector<int>& ts) {
        Matd in(z.rows(), 2 + freq);
        in.leftCols(2) = z;
        for (Eigen::Index i = 0; i < z.rows(); ++i) in.row(i).tail(freq) = timestep_embed<double>(ts[i], freq);
        auto h = ag::silu<double>(l1(ag::constant<double>(in)));
        h = ag::silu<double>(l2(h));
        return l3(h);
    };
    const auto sched = make_schedule(1000, ScheduleKind::cosine);
    AdamW<double> opt(AdamWConfig{2e-3, 0.9, 0.999, 1e-8, 0.0, 1.0});
    const int batch = 256;
    for (int step = 0; step < 4000; ++step) {
        if (step == 3000) opt.set_lr(5e-4);
        Matd x0 = rng.normal_matrix<double>(batch, 2);
        for (int i = 0; i < batch; ++i) x0.row(i) = (x0.row(i).array() * sd.array()).matrix() + mean;
        const Matd eps = rng.normal_matrix<double>(batch, 2);
        std::vector<int> ts(batch);
        Matd zt(batch, 2);
        for (int i = 0; i < batch; ++i) {
            ts[i] = static_cast<int>(rng.uniform_int(0, 999));
            const double ab = sched.alpha_bars[static_cast<std::size_t>(ts[i])];
            zt.row(i) = std::sqrt(ab) * x0.row(i) + std::sqrt(1.0 - ab) * eps.row(i);
        }
        store.zero_grad();
        ag::backward(ag::mse<double>(net(zt, ts), eps));
        opt.step(store);
    }
    ag::NoGradGuard ng;
    auto model = [&](const Matd& z, int t, int) -> Matd { return net(z, std::vector<int>(z.rows(), t))->value; };
    const Matd s = sample<double>(model, 0, 0, GuidanceConfig{1.0, 50, 66}, sched, 1000, 2);
    const Eigen::RowVector2d m = s.colwise().mean();
    const Matd centered = s.rowwise() - m;
    const Eigen::RowVector2d var = centered.array().square().colwise().sum() / 999.0;
    const double mean_err = (m - mean).cwiseAbs().maxCoeff();
    const double var_err = std::max(std::abs(var(0) / (sd(0) * sd(0)) - 1.0), std::abs(var(1) / (sd(1) * sd(1)) - 1.0));
    return {mean_err <= 0.1 && var_err <= 0.2,
            fmt("mean (%.3f, %.3f), variance ratio error %.3f", m(0), m(1), var_err, 0.0)};
}

// ---------------------------------------------------------------- 7

Outcome toy_overfit(const std::filesystem::path& work) {
    RestorationConfig rc;
    rc.backbone = BackboneConfig{16, 3, 2, 64, 4, 4, 32, 16, 4, 64};
    PretrainConfig pc;
    pc.model = rc;
    pc.loop.steps = 3000;
    pc.loop.batch = 8;
    pc.loop.seed = 1;
    pc.remover_steps = 300;
    pc.out_checkpoint = (work / "toy16.ckpt").string();
    pretrain(pc, procedural_pairs(200, 16, 7, DegradationConfig{}, 0, 1.0, 2.5));

    RestorationModel model = model_from_checkpoint(load_checkpoint(pc.out_checkpoint));
    LoopConfig loop{2000, 4, AdamWConfig{5e-5, 0.9, 0.999, 1e-8, 0.0, 0.0}, 5, 0.0};
    Trainer tr(model, procedural_pairs(1, 16, 7, DegradationConfig{}, 1000, 1.0, 2.5), loop, Trainer::Target::control);
    const double start = tr.eval_loss(256, 3);
    double best = start;
    int best_step = 0;
    for (int s = 1; s <= 2000; ++s) {
        tr.step();
        if (s % 250 == 0) {
            const double e = tr.eval_loss(256, 3);
            if (e < best) best = e, best_step = s;
        }
    }
    return {best < 0.05, fmt("loss %.4f -> %.4f (step %g)", start, best, best_step)};
}

// ---------------------------------------------------------------- 8

Outcome restoration_vs_bicubic(const std::filesystem::path& work) {
    const DegradationConfig dc;
    PretrainConfig pc;
    pc.loop.steps = 4000;
    pc.loop.batch = 4;
    pc.loop.seed = 1;
    pc.remover_steps = 2000;
    pc.out_checkpoint = (work / "pre64.ckpt").string();
    const auto pairs = procedural_pairs(200, 64, 7, dc);
    pretrain(pc, pairs);

    RestorationModel model = model_from_checkpoint(load_checkpoint(pc.out_checkpoint));
    LoopConfig loop{3000, 2, AdamWConfig{}, 5, 0.1};
    Trainer tr(model, pairs, loop, Trainer::Target::control);
    for (int s = 0; s < loop.steps; ++s) tr.step();

    const auto test = procedural_pairs(20, 64, 7, dc, 5000);
    double pr = 0, pb = 0, sr = 0, sb = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        const Image out = model.restore(test[i].lq, GuidanceConfig{4.5, 50, i});
        const Image bic = clamp01(resize_bicubic(test[i].lq, 64, 64));
        pr += psnr_y(out, test[i].hq) / 20.0;
        pb += psnr_y(bic, test[i].hq) / 20.0;
        sr += ssim_y(out, test[i].hq) / 20.0;
        sb += ssim_y(bic, test[i].hq) / 20.0;
    }
    return {pr >= pb && sr >= sb, fmt("PSNR-Y %.2f vs bicubic %.2f, SSIM-Y %.4f vs %.4f", pr, pb, sr, sb)};
}

// ---------------------------------------------------------------- 9

Outcome degradation_determinism(const std::filesystem::path& work) {
    const auto dir = work / "pairs500";
    Rng src(9);
    for (int i = 0; i < 500; ++i) {
        const Image source = quantize_u8(random_image(72, 72, 3, src));
        Rng rng(derive_seed(9, static_cast<std::uint64_t>(i)));
        write_pair(dir, "p" + std::to_string(i), make_pair(source, 64, rng, DegradationConfig{}));
    }
    int replayed = 0, side_ok = 0;
    for (const auto& rec : read_pair_manifest(dir / "pairs.jsonl")) {
        const Image hq = load_png(dir / rec.hq_path);
        const Image lq = load_png(dir / rec.lq_path);
        replayed += to_bytes(replay_pair(hq, rec)) == to_bytes(lq);
        side_ok += lq.width * 4 == hq.width && lq.height * 4 == hq.height;
    }
    return {replayed == 500 && side_ok == 500, fmt("%g/500 replayed exactly, %g/500 with LQ side = HQ side / 4",
                                                   replayed, side_ok)};
}

// ---------------------------------------------------------------- 10

Outcome metric_oracles() {
    Rng rng(10);
    double worst_psnr = 0.0, worst_ssim = 0.0;
    for (int i = 0; i < 20; ++i) {
        const Image a = random_image(24 + i % 4, 20 + i % 3, 3, rng);
        Image b = a;
        for (auto& v : b.pixels) v = std::clamp(v + static_cast<float>(0.1 * rng.normal()), 0.0f, 1.0f);
        worst_psnr = std::max(worst_psnr, std::abs(psnr(a, b) - psnr_oracle(a, b)));
        worst_ssim = std::max(worst_ssim, std::abs(ssim_y(a, b) - ssim_oracle(luma_oracle(a), luma_oracle(b), a.width,
                                                                              a.height)));
    }
    const Image a = random_image(32, 32, 3, rng);
    const double self = std::abs(ssim_y(a, a) - 1.0);
    const double zero = psnr(Image(16, 16, 3, 0.0f), Image(16, 16, 3, 1.0f));
    return {worst_psnr <= 1e-6 && worst_ssim <= 1e-6 && self <= 1e-9 && zero == 0.0,
            fmt("psnr err %.3g, ssim err %.3g, |SSIM(a,a)-1| %.3g, PSNR(0,peak) %.3g dB", worst_psnr, worst_ssim, self,
                zero)};
}

// ---------------------------------------------------------------- 11

Outcome topk() {
    Rng rng(11);
    int mismatches = 0, violations = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const int m = 2 + trial % 6;
        ScoreTable t{m, {}};
        for (int g = 0; g < 50; ++g) {
            std::vector<std::int64_t> row;
            for (int j = 0; j < m; ++j) row.push_back(rng.uniform_int(0, 4));
            t.counts.push_back(row);
        }
        std::vector<double> prev(static_cast<std::size_t>(m), 0.0);
        for (int k = 1; k <= m; ++k) {
            const auto got = topk_ratio(t, k);
            mismatches += got != topk_oracle(t.counts, k);
            for (int j = 0; j < m; ++j) violations += got[static_cast<std::size_t>(j)] < prev[static_cast<std::size_t>(j)];
            prev = got;
        }
    }
    return {mismatches == 0 && violations == 0, fmt("%g oracle mismatches, %g monotonicity violations", mismatches,
                                                   violations)};
}

// ---------------------------------------------------------------- 12

Outcome genir_invariants(const std::filesystem::path& work) {
    std::ostringstream why;
    bool ok = true;

    GenIRModel m = random_genir_model(tiny_genir_config(), 12);
    const auto before = snapshot(m.store());
    AdamW<float> opt(AdamWConfig{1e-2, 0.9, 0.999, 1e-8, 0.0, 0.0});
    Rng rng(12);
    for (int i = 0; i < 5; ++i) dual_prompt_finetune_step(m, striped_toy_set(4, 3), opt, rng);
    int frozen_changed = 0, bank_changed = 0;
    for (const auto& [name, p] : m.store().entries()) {
        const bool same = bitwise_equal<float>(p->value, before.at(name));
        if (!has_prefix(name, m.finetune_prefixes())) frozen_changed += !same;
        if (name.rfind("bank.", 0) == 0) bank_changed += !same;
    }
    ok = ok && frozen_changed == 0 && bank_changed > 0;
    why << frozen_changed << " frozen tensors changed; ";

    const CuratePlan plan = counting_plan();
    int oracle_kept = 0;
    for (int i = 0; i < 100; ++i) oracle_kept += plan.probs[static_cast<std::size_t>(i)] >= 0.5 && !plan.rejected.count(i);
    StubMllmClient stub("yes", plan.responses());
    const auto summary = curate(CurateConfig{(work / "curate").string(), 0.5, 100},
                                [&](int i) { return plan.generate(i); },
                                [&](const Image& img) { return plan.score(img); }, stub);
    int manifest_kept = 0, rows = 0, veto_violations = 0;
    std::ifstream in(work / "curate" / "manifest.jsonl");
    for (std::string line; std::getline(in, line);) {
        const auto v = nlohmann::json::parse(line).get<FilterVerdict>();
        ++rows;
        manifest_kept += v.kept;
        veto_violations += v.kept != (v.classifier_prob >= 0.5 && v.mllm_pass != false);
    }
    ok = ok && rows == 100 && manifest_kept == oracle_kept && summary.kept == oracle_kept && veto_violations == 0;
    why << "curate kept " << manifest_kept << " (oracle " << oracle_kept << "); ";

    const auto sched = m.schedule();
    Rng src(13);
    const Image a = quantize_u8(random_image(8, 8, 3, src)), b = quantize_u8(random_image(8, 8, 3, src));
    Rng r0(1), r1(2), r2(2);
    const bool identity = bitwise_equal(img2img_negative(a, 0.0, "cartoon", m, sched, r0, 10), a);
    const bool independent = bitwise_equal(img2img_negative(a, 1.0, "cartoon", m, sched, r1, 10),
                                           img2img_negative(b, 1.0, "cartoon", m, sched, r2, 10));
    ok = ok && identity && independent;
    why << "img2img identity " << identity << ", independence " << independent;
    return {ok, why.str()};
}

// ---------------------------------------------------------------- 13

Outcome dual_prompt_efficacy(const std::filesystem::path& work) {
    PromptTrainConfig cfg;
    cfg.out_dir = (work / "prompts").string();
    train_prompts(cfg);
    const GenIRModel tuned = load_genir(work / "prompts" / "genir.ckpt");
    const GenIRModel base = load_genir(work / "prompts" / "base.ckpt");
    const auto clf = QualityClassifier::from_json(read_json_file(work / "prompts" / "classifier.json"));
    const auto scenes = toy_scenes(200, 99);
    const GuidanceConfig g{tuned.config().curate_omega, 50, 1234};
    const auto with_bank = generate_candidates(tuned, scenes, g);
    const auto without = generate_plain(base, scenes, g);
    int wins = 0;
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        const double sa = clf.score(with_bank[i]), sb = clf.score(without[i]);
        wins += sa > sb;
        ma += sa / 200.0;
        mb += sb / 200.0;
    }
    const double p = sign_test_p(wins, 200);
    return {p < 0.05, fmt("%g/200 wins, p = %.3g, mean score %.3f vs %.3f", wins, p, ma, mb)};
}

}  // namespace

int main(int argc, char** argv) {
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
    const TempDir work("acceptance");

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"zero-init identity", zero_init_identity},
        {"router simplex", router_simplex},
        {"expert modulation oracles", modulation_oracles},
        {"guidance combiner contract", cfg_contract},
        {"gradient checks", gradient_checks},
        {"sampler sanity", sampler_sanity},
        {"toy overfit", [&] { return toy_overfit(work.path()); }},
        {"restoration beats bicubic", [&] { return restoration_vs_bicubic(work.path()); }},
        {"degradation determinism", [&] { return degradation_determinism(work.path()); }},
        {"metric oracles", metric_oracles},
        {"top-k ratio", topk},
        {"GenIR pipeline invariants", [&] { return genir_invariants(work.path()); }},
        {"dual-prompt efficacy", [&] { return dual_prompt_efficacy(work.path()); }},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!only.empty() && !only.count(id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        failed += !o.pass;
        std::printf("%s %2d %-28s %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(),
                    o.detail.c_str(), secs);
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
