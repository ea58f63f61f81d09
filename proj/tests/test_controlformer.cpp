#include <doctest.h>

#include "dreamclear/controlformer.hpp"
#include "dreamclear/harness.hpp"
#include "dreamclear/schedule.hpp"
#include "test_support.hpp"

using namespace dreamclear;
using dreamclear::testing::bitwise_equal;
using dreamclear::testing::random_image;
using dreamclear::testing::randomize;

namespace {

RestorationConfig tiny_config() {
    RestorationConfig c;
    c.backbone = BackboneConfig{16, 3, 4, 32, 2, 4, 16, 8, 2, 16};
    c.num_experts = 3;
    c.vocab_size = 64;
    c.remover_hidden = 4;
    c.diffusion_steps = 100;
    return c;
}

// Backbone with random weights everywhere (including its zero head) and a
// control branch freshly copied from it.
RestorationModel random_backbone_model(std::uint64_t seed) {
    RestorationModel m = RestorationModel::create(tiny_config(), seed);
    Rng rng(seed + 100);
    for (const auto& [name, p] : m.store().entries()) {
        if (name.rfind("backbone.", 0) == 0) p->value = rng.normal_matrix<float>(p->rows(), p->cols()) * 0.2f;
    }
    return with_fresh_control(m, seed + 1);
}

}  // namespace

TEST_SUITE("controlformer") {

TEST_CASE("control branch initialization copies blocks and zeroes projections") {
    ParamStore<double> store;
    Rng rng(1);
    const BackboneConfig cfg{8, 2, 2, 16, 2, 4, 8, 4, 2, 16};
    const auto bb = Backbone<double>::create(store, "backbone", cfg, rng);
    randomize(store, rng, 0.3);
    const auto ctl = ControlBranch<double>::init_from_backbone(store, "control", bb, 3, rng);
    for (const auto& [name, p] : store.entries()) {
        if (name.rfind("backbone.blocks.", 0) != 0) continue;
        CHECK(bitwise_equal<double>(p->value, store.get("control" + name.substr(8))->value));
    }
    REQUIRE(ctl.out_projections().size() == 2);
    for (const auto& l : ctl.out_projections()) {
        CHECK(l.weight->value.isZero(0.0));
        CHECK(l.bias->value.isZero(0.0));
    }
    CHECK(ctl.moams().size() == 2);
}

TEST_CASE("residuals of a fresh branch are zero and scale with the projection") {
    ParamStore<double> store;
    Rng rng(2);
    const BackboneConfig cfg{8, 2, 2, 16, 2, 4, 8, 4, 2, 16};
    const auto bb = Backbone<double>::create(store, "backbone", cfg, rng);
    randomize(store, rng, 0.3);
    const auto ctl = ControlBranch<double>::init_from_backbone(store, "control", bb, 3, rng);
    auto z = ag::constant<double>(rng.normal_matrix<double>(64, 2));
    TextTokens<double> text{ag::constant<double>(rng.normal_matrix<double>(2, 8)), {1, 1}};
    const auto cond = ctl.prepare_condition(ctl.encode_lq(ag::constant<double>(rng.normal_matrix<double>(64, 2))),
                                            ctl.encode_ref(ag::constant<double>(rng.normal_matrix<double>(64, 2))));
    const auto prepared = bb.prepare(z, 5, text);
    const auto fresh = ctl.forward(prepared, cond);
    REQUIRE(fresh.per_block.size() == 2);
    for (const auto& r : fresh.per_block) CHECK(r->value.isZero(0.0));

    for (const auto& l : ctl.out_projections()) l.weight->value = rng.normal_matrix<double>(16, 16);
    const auto once = ctl.forward(prepared, cond);
    for (const auto& l : ctl.out_projections()) l.weight->value *= 2.0;
    const auto twice = ctl.forward(prepared, cond);
    // Block 0 feeds the projection directly; later blocks do not depend on
    // earlier residuals, so every residual doubles.
    for (int i = 0; i < 2; ++i) {
        CHECK((twice.per_block[i]->value - 2.0 * once.per_block[i]->value).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("condition encoding") {
    RestorationConfig c = tiny_config();
    c.backbone = BackboneConfig{64, 3, 8, 32, 1, 4, 16, 8, 2, 16};
    RestorationModel m = RestorationModel::create(c, 3);
    Rng rng(3);
    const Image img = random_image(64, 64, 3, rng);
    const auto a = m.control().encode_lq(ag::constant<float>(img.to_mat()));
    CHECK(a.num_tokens() == 64);
    CHECK(a.channels() == 32);
    CHECK(bitwise_equal<float>(a.tokens->value, m.control().encode_lq(ag::constant<float>(img.to_mat())).tokens->value));
    CHECK(m.control().encode_ref(ag::constant<float>(Matf::Zero(64 * 64, 3))).tokens->value.isZero(0.0));
    CHECK_THROWS(m.control().encode_lq(ag::constant<float>(Matf::Zero(32 * 32, 3))));
}

TEST_CASE("zero-init identity end to end") {
    RestorationModel m = random_backbone_model(4);
    Rng rng(4);
    const auto text = m.prompt_tokens(false);
    for (int trial = 0; trial < 5; ++trial) {
        const Matf z = rng.normal_matrix<float>(256, 3);
        const Image lq = random_image(4, 4, 3, rng);
        const auto cond = m.condition(lq);
        const int t = static_cast<int>(rng.uniform_int(0, 99));
        const Matf with = m.predict(z, t, text, &cond)->value;
        const Matf without = m.predict(z, t, text, nullptr)->value;
        CHECK_FALSE(without.isZero(0.0f));
        CHECK((with - without).cwiseAbs().maxCoeff() <= 1e-6f);
    }
    const GuidanceConfig g{1.0, 5, 11};
    CHECK(bitwise_equal(m.restore(random_image(4, 4, 3, rng), g), m.sample_backbone(g)));
}

TEST_CASE("restore contracts") {
    RestorationModel m = random_backbone_model(5);
    Rng rng(5);
    const Image lq = random_image(4, 4, 3, rng);
    const GuidanceConfig g{4.5, 4, 7};
    const Image a = m.restore(lq, g);
    CHECK(a.width == 16);
    CHECK(a.height == 16);
    CHECK(bitwise_equal(a, m.restore(lq, g)));
    for (float v : a.pixels) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
    CHECK_THROWS(m.restore(random_image(8, 8, 3, rng), g));
}

TEST_CASE("gradients reach every control parameter once the zero layers have moved") {
    RestorationModel m = random_backbone_model(6);
    auto pairs = procedural_pairs(2, 16, 6, DegradationConfig{});
    LoopConfig loop;
    loop.steps = 3;
    loop.batch = 2;
    loop.optim.lr = 1e-2;
    loop.caption_dropout = 0.0;
    Trainer tr(m, pairs, loop, Trainer::Target::control);
    for (int i = 0; i < 3; ++i) tr.step();

    auto& store = m.store();
    store.set_trainable({"control."});
    store.zero_grad();
    const auto sched = m.schedule();
    Rng rng(6);
    const auto cond = m.condition(pairs[0].lq);
    const Matf z0 = m.config().codec.encode(pairs[0].hq);
    auto model = [&](const Matf& zt, int t, int) { return m.predict(zt, t, m.prompt_tokens(false), &cond); };
    ag::backward(diffusion_loss_at<float>(model, z0, 0, 50, rng.normal_matrix<float>(256, 3), sched));
    int dead = 0;
    for (const auto& [name, p] : store.entries()) {
        if (name.rfind("control.", 0) != 0) continue;
        if (p->grad.size() == 0 || p->grad.norm() == 0.0f) {
            MESSAGE("no gradient: " << name);
            ++dead;
        }
    }
    CHECK(dead == 0);
}

TEST_CASE("removers") {
    Rng rng(7);
    BicubicRemover bic;
    CHECK(bic(random_image(16, 16, 3, rng)).width == 64);
    const Image flat(8, 8, 3, 0.3f);
    for (float v : bic(flat).pixels) CHECK(v == doctest::Approx(0.3f).epsilon(1e-5));
    CHECK_THROWS(bic(Image(4, 4, 3, 2.0f)));

    ParamStore<float> store;
    ConvRemover conv = ConvRemover::create(store, "remover", 3, 8, rng);
    std::vector<std::pair<Image, Image>> train, test;
    for (const auto& p : procedural_pairs(24, 32, 8, DegradationConfig{})) train.emplace_back(p.lq, p.hq);
    for (const auto& p : procedural_pairs(8, 32, 8, DegradationConfig{}, 500)) test.emplace_back(p.lq, p.hq);
    train_remover(conv, store, "remover", train, 400, 3e-3, 1);
    double conv_mse = 0.0, bic_mse = 0.0;
    for (const auto& [lq, hq] : test) {
        conv_mse += (conv(lq).to_mat() - hq.to_mat()).squaredNorm();
        bic_mse += (bic(lq).to_mat() - hq.to_mat()).squaredNorm();
    }
    CHECK(conv_mse < bic_mse);
}

TEST_CASE("latent codec round trip") {
    Rng rng(8);
    const Image img = random_image(5, 5, 3, rng);
    const LatentCodec codec;
    const Matf z = codec.encode(img);
    CHECK(z.minCoeff() >= -1.0f);
    CHECK(z.maxCoeff() <= 1.0f);
    const Image back = codec.decode(z, 5, 5);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) CHECK(back.pixels[i] == doctest::Approx(img.pixels[i]).epsilon(1e-6));
}

}
