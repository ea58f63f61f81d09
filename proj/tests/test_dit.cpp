#include <doctest.h>

#include "dreamclear/dit.hpp"
#include "dreamclear/schedule.hpp"
#include "dreamclear/text.hpp"
#include "test_support.hpp"

using namespace dreamclear;
using dreamclear::testing::bitwise_equal;
using dreamclear::testing::gradient_check;
using dreamclear::testing::randomize;

namespace {

TextTokens<double> random_text(Rng& rng, int len, int dim) {
    return {ag::constant<double>(rng.normal_matrix<double>(len, dim)), std::vector<std::uint8_t>(len, 1)};
}

}  // namespace

TEST_SUITE("dit") {

TEST_CASE("patchify shapes and round trip") {
    Rng rng(1);
    auto z = ag::constant<double>(rng.normal_matrix<double>(256, 4));
    const auto grid = patchify<double>(z, 16, 16, 2, nullptr);
    CHECK(grid.num_tokens() == 64);
    CHECK(grid.channels() == 16);
    CHECK(patchify<double>(z, 16, 16, 1, nullptr).num_tokens() == 256);
    CHECK(bitwise_equal<double>(unpatchify<double>(grid, 2, 4)->value, z->value));
    CHECK_THROWS(patchify<double>(z, 16, 16, 3, nullptr));
    CHECK_THROWS(unpatchify<double>(grid, 2, 3));

    // A patch holds its pixels in row-major, channel-last order.
    CHECK(grid.tokens->value(0, 4) == z->value(1, 0));
    CHECK(grid.tokens->value(0, 8) == z->value(16, 0));
    CHECK(grid.tokens->value(1, 0) == z->value(2, 0));
}

TEST_CASE("a one-token grid fills the whole output") {
    Rng rng(2);
    TokenGrid<double> g{ag::constant<double>(rng.normal_matrix<double>(1, 12)), 1, 1};
    const Matd img = unpatchify<double>(g, 2, 3)->value;
    CHECK(img.rows() == 4);
    for (int i = 0; i < 12; ++i) CHECK(img.data()[i] == g.tokens->value(0, i));
}

TEST_CASE("timestep embedding") {
    CHECK(bitwise_equal<double>(timestep_embed<double>(17, 64), timestep_embed<double>(17, 64)));
    CHECK_FALSE(bitwise_equal<double>(timestep_embed<double>(0, 64), timestep_embed<double>(1, 64)));
    CHECK_THROWS(timestep_embed<double>(3, 63));
    CHECK_THROWS(timestep_embed<double>(-1, 64));
}

TEST_CASE("dit block with all weights zero is a pure residual") {
    BackboneConfig cfg{8, 2, 2, 16, 1, 4, 8, 4, 2, 16};
    ParamStore<double> store;
    Rng rng(3);
    const auto p = DitBlockParams<double>::create(store, "b", cfg, rng);
    for (const auto& [n, v] : store.entries()) v->value.setZero();
    auto x = ag::constant<double>(rng.normal_matrix<double>(16, 16));
    auto cond = ag::constant<double>(rng.normal_matrix<double>(1, 16));
    auto text = ag::constant<double>(rng.normal_matrix<double>(3, 16));
    const std::vector<std::uint8_t> mask{1, 1, 1};
    CHECK(bitwise_equal<double>(dit_block_forward<double>(x, cond, text, mask, p)->value, x->value));
}

TEST_CASE("masked text contributes nothing and key order does not matter") {
    BackboneConfig cfg{8, 2, 2, 16, 1, 4, 8, 4, 2, 16};
    ParamStore<double> store;
    Rng rng(4);
    const auto p = DitBlockParams<double>::create(store, "b", cfg, rng);
    randomize(store, rng, 0.3);
    auto x = ag::constant<double>(rng.normal_matrix<double>(16, 16));
    auto cond = ag::constant<double>(rng.normal_matrix<double>(1, 16));
    const Matd t = rng.normal_matrix<double>(3, 16);
    auto text = ag::constant<double>(t);
    const std::vector<std::uint8_t> none{0, 0, 0};
    // Nothing is attended, so only the output bias remains.
    const Matd masked = text_cross_attention<double>(x, text, none, p)->value;
    CHECK(bitwise_equal<double>(masked, p.cross_o.bias->value.replicate(16, 1)));

    Matd swapped = t;
    swapped.row(0) = t.row(2);
    swapped.row(2) = t.row(0);
    const std::vector<std::uint8_t> mask{1, 0, 1};
    const Matd a = dit_block_forward<double>(x, cond, text, mask, p)->value;
    const Matd b = dit_block_forward<double>(x, cond, ag::constant<double>(swapped), mask, p)->value;
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("backbone initialization and residual injection") {
    BackboneConfig cfg{8, 2, 2, 16, 2, 4, 8, 4, 2, 16};
    ParamStore<double> store;
    Rng rng(5);
    const auto bb = Backbone<double>::create(store, "backbone", cfg, rng);
    auto z = ag::constant<double>(rng.normal_matrix<double>(64, 2));
    const auto text = random_text(rng, 3, 8);
    CHECK(bb.forward(z, 10, text)->value.isZero(0.0));

    randomize(store, rng, 0.2);
    const Matd plain = bb.forward(z, 10, text)->value;
    CHECK(plain.rows() == 64);
    CHECK(plain.cols() == 2);
    CHECK(bitwise_equal<double>(plain, bb.forward(z, 10, text)->value));
    ControlResiduals<double> zeros;
    for (int i = 0; i < 2; ++i) zeros.per_block.push_back(ag::constant<double>(Matd::Zero(16, 16)));
    CHECK(bitwise_equal<double>(plain, bb.forward(z, 10, text, &zeros)->value));
    ControlResiduals<double> bump = zeros;
    bump.per_block[1] = ag::constant<double>(rng.normal_matrix<double>(16, 16));
    CHECK_FALSE(bitwise_equal<double>(plain, bb.forward(z, 10, text, &bump)->value));
    ControlResiduals<double> short_list;
    short_list.per_block.push_back(zeros.per_block[0]);
    CHECK_THROWS(bb.forward(z, 10, text, &short_list));
    CHECK_THROWS(bb.forward(z, 10, random_text(rng, 5, 8)));
}

TEST_CASE("backbone parameter gradients match finite differences") {
    BackboneConfig cfg{8, 2, 2, 16, 2, 4, 8, 4, 2, 16};
    ParamStore<double> store;
    Rng rng(6);
    const auto bb = Backbone<double>::create(store, "backbone", cfg, rng);
    randomize(store, rng, 0.25);
    const auto sched = make_schedule(100, ScheduleKind::cosine);
    const Matd z0 = rng.normal_matrix<double>(64, 2);
    const Matd eps = rng.normal_matrix<double>(64, 2);
    const auto text = random_text(rng, 3, 8);
    auto model = [&](const Matd& zt, int t, int) { return bb.forward(ag::constant<double>(zt), t, text); };
    std::vector<ag::Var<double>> params;
    for (const auto& [n, v] : store.entries()) params.push_back(v);
    const auto r = gradient_check(params, [&] { return diffusion_loss_at<double>(model, z0, 0, 40, eps, sched); }, 100,
                                  rng);
    CHECK(r.checked == 100);
    CHECK(r.max_rel_error <= 1e-3);
}

TEST_CASE("text embedder") {
    ParamStore<float> store;
    Rng rng(7);
    const auto emb = TextEmbedder<float>::create(store, "text", 64, 8, rng);
    CHECK(tokenize_words("A Sharp, clean photo!") == std::vector<std::string>{"a", "sharp", "clean", "photo"});
    const auto tok = emb.embed("red red blue", 16);
    CHECK(tok.length() == 3);
    CHECK(bitwise_equal<float>(tok.embeddings->value.row(0), tok.embeddings->value.row(1)));
    CHECK(emb.embed("one two three four", 2).length() == 2);
    CHECK(emb.embed("", 8).length() == 0);
}

}
