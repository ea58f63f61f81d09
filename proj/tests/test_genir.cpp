#include <doctest.h>

#include <atomic>
#include <fstream>
#include <thread>

#include "dreamclear/genir.hpp"
#include "genir_fixtures.hpp"
#include "test_support.hpp"

// After Eigen: resolv.h defines a _res macro that clashes with Eigen internals.
#include <httplib.h>

using namespace dreamclear;
using namespace dreamclear::testing;
using nlohmann::json;

namespace {

std::vector<FilterVerdict> read_manifest(const std::filesystem::path& p) {
    std::vector<FilterVerdict> out;
    std::ifstream in(p);
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) out.push_back(json::parse(line).get<FilterVerdict>());
    }
    return out;
}

}  // namespace

TEST_SUITE("genir") {

TEST_CASE("prompt bank initialization") {
    GenIRConfig c = tiny_genir_config();
    c.backbone.max_text_tokens = 12;
    c.bank_pos = 8;
    c.bank_neg = 8;
    const GenIRModel m = GenIRModel::create(c, 1);
    const auto& bank = m.bank();
    CHECK(bank.num_pos() == 8);
    CHECK(bank.num_neg() == 8);
    CHECK(bank.pos->cols() == m.text().dim());
    const Matf words = m.text().embed(c.pos_init_text, 100).embeddings->value;
    REQUIRE(words.rows() == 7);
    for (int i = 0; i < 8; ++i) CHECK(bitwise_equal<float>(bank.pos->value.row(i), words.row(i % 7)));
    const Matf neg_words = m.text().embed(c.neg_init_text, 100).embeddings->value;
    for (int i = 0; i < 8; ++i) {
        CHECK(bitwise_equal<float>(bank.neg->value.row(i), neg_words.row(i % neg_words.rows())));
    }

    ParamStore<float> store;
    Rng rng(1);
    const auto text = TextEmbedder<float>::create(store, "text", 32, 8, rng);
    CHECK_THROWS(PromptBank::init(store, "bank", 2, 2, "", "blurry", text));
    CHECK_THROWS(PromptBank::init(store, "bank2", -1, 2, "sharp", "blurry", text));
}

TEST_CASE("empty bank generation equals the base model") {
    GenIRConfig c = tiny_genir_config();
    c.bank_pos = 0;
    c.bank_neg = 0;
    const GenIRModel m = random_genir_model(c, 2);
    CHECK(m.bank().num_pos() == 0);
    const std::vector<std::string> scenes{"red and blue stripes", "green spots"};
    const GuidanceConfig g{3.0, 5, 9};
    const auto a = generate_candidates(m, scenes, g);
    const auto b = generate_plain(m, scenes, g);
    REQUIRE(a.size() == 2);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(bitwise_equal(a[i], b[i]));
}

TEST_CASE("dual-prompt fine-tuning touches only the bank and text-path key/value maps") {
    GenIRModel m = random_genir_model(tiny_genir_config(), 3);
    const auto before = snapshot(m.store());
    const auto batch = striped_toy_set(4, 3);
    AdamW<float> opt(AdamWConfig{1e-2, 0.9, 0.999, 1e-8, 0.0, 0.0});
    Rng rng(3);
    for (int i = 0; i < 3; ++i) CHECK(std::isfinite(dual_prompt_finetune_step(m, batch, opt, rng)));
    const auto prefixes = m.finetune_prefixes();
    bool bank_changed = false, kv_changed = false;
    for (const auto& [name, p] : m.store().entries()) {
        const bool same = bitwise_equal<float>(p->value, before.at(name));
        if (!has_prefix(name, prefixes)) {
            CHECK_MESSAGE(same, name);
        } else if (name.rfind("bank.", 0) == 0) {
            bank_changed = bank_changed || !same;
        } else {
            kv_changed = kv_changed || !same;
        }
    }
    CHECK(bank_changed);
    CHECK(kv_changed);
    for (const auto& p : prefixes) {
        const bool kv = p.find("cross_k.") != std::string::npos || p.find("cross_v.") != std::string::npos;
        CHECK((p == "bank." || kv));
    }
}

TEST_CASE("zero learning rate leaves every parameter unchanged") {
    GenIRModel m = random_genir_model(tiny_genir_config(), 4);
    const auto before = snapshot(m.store());
    AdamW<float> opt(AdamWConfig{0.0, 0.9, 0.999, 1e-8, 0.0, 0.0});
    Rng rng(4);
    CHECK(std::isfinite(dual_prompt_finetune_step(m, striped_toy_set(4, 3), opt, rng)));
    for (const auto& [name, p] : m.store().entries()) CHECK(bitwise_equal<float>(p->value, before.at(name)));
}

TEST_CASE("fine-tune input validation") {
    GenIRModel m = random_genir_model(tiny_genir_config(), 5);
    AdamW<float> opt(AdamWConfig{});
    Rng rng(5);
    auto batch = striped_toy_set(2, 3);
    batch[1].label.reset();
    CHECK_THROWS_AS(dual_prompt_finetune_step(m, batch, opt, rng), std::invalid_argument);
    CHECK_THROWS_AS(dual_prompt_finetune_step(m, {}, opt, rng), std::invalid_argument);
    CHECK_THROWS(dual_prompt_finetune_step(m, striped_toy_set(2, 2), opt, rng));
}

TEST_CASE("two-channel toy fine-tune lowers the loss") {
    GenIRModel m = GenIRModel::create(tiny_genir_config(2), 1);
    const auto data = striped_toy_set(16, 2);
    std::vector<CaptionedImage> captioned;
    for (const auto& d : data) captioned.push_back({d.image, d.caption});
    Rng rng(2);
    AdamW<float> base_opt(AdamWConfig{1e-3, 0.9, 0.999, 1e-8, 0.0, 1.0});
    for (int s = 0; s < 1500; ++s) t2i_train_step(m, {captioned[s % 16], captioned[(s + 3) % 16]}, base_opt, rng);

    AdamW<float> opt(AdamWConfig{3e-3, 0.9, 0.999, 1e-8, 0.0, 1.0});
    std::vector<double> losses;
    for (int s = 0; s < 500; ++s) {
        std::vector<LabeledImage> batch;
        for (int k = 0; k < 4; ++k) batch.push_back(data[static_cast<std::size_t>((4 * s + k) % 16)]);
        losses.push_back(dual_prompt_finetune_step(m, batch, opt, rng));
    }
    double start = 0.0, end = 0.0;
    for (int i = 0; i < 10; ++i) start += losses[static_cast<std::size_t>(i)] / 10.0;
    for (int i = 450; i < 500; ++i) end += losses[static_cast<std::size_t>(i)] / 50.0;
    MESSAGE("start " << start << " end " << end);
    CHECK(end <= 0.7 * start);
}

TEST_CASE("img2img endpoints") {
    const GenIRModel m = random_genir_model(tiny_genir_config(), 6);
    const auto sched = m.schedule();
    Rng src(6);
    const Image a = quantize_u8(random_image(8, 8, 3, src));
    const Image b = quantize_u8(random_image(8, 8, 3, src));
    Rng r0(1);
    CHECK(bitwise_equal(img2img_negative(a, 0.0, "cartoon", m, sched, r0, 10), a));
    Rng r1(7), r2(7);
    const Image x = img2img_negative(a, 1.0, "cartoon", m, sched, r1, 10);
    const Image y = img2img_negative(b, 1.0, "cartoon", m, sched, r2, 10);
    CHECK(bitwise_equal(x, y));
    Rng r3(7);
    const Image mid = img2img_negative(a, 0.6, "cartoon", m, sched, r3, 10);
    CHECK(mid.same_shape(a));
    CHECK_FALSE(bitwise_equal(mid, a));
    CHECK_THROWS(img2img_negative(a, 1.5, "cartoon", m, sched, r0, 10));
    CHECK_THROWS(img2img_negative(a, -0.1, "cartoon", m, sched, r0, 10));
    CHECK_THROWS(img2img_negative(random_image(16, 16, 3, src), 0.5, "cartoon", m, sched, r0, 10));
}

TEST_CASE("guided generation with the bank") {
    GenIRModel m = random_genir_model(tiny_genir_config(), 7);
    const std::vector<std::string> scenes{"red stripes", "blue spots", "green waves"};
    const auto one = generate_candidates(m, scenes, GuidanceConfig{1.0, 5, 3});
    const auto guided = generate_candidates(m, scenes, GuidanceConfig{3.0, 5, 3});
    CHECK(bitwise_equal(guided[1], generate_candidates(m, scenes, GuidanceConfig{3.0, 5, 3})[1]));
    m.store().get("bank.neg")->value.setConstant(0.7f);
    const auto one_after = generate_candidates(m, scenes, GuidanceConfig{1.0, 5, 3});
    const auto guided_after = generate_candidates(m, scenes, GuidanceConfig{3.0, 5, 3});
    for (std::size_t i = 0; i < scenes.size(); ++i) CHECK(bitwise_equal(one[i], one_after[i]));
    bool differs = false;
    for (std::size_t i = 0; i < scenes.size(); ++i) differs = differs || !bitwise_equal(guided[i], guided_after[i]);
    CHECK(differs);
    CHECK_THROWS(generate_candidates(m, {}, GuidanceConfig{3.0, 5, 3}));
}

TEST_CASE("logistic regression on separable features") {
    Rng rng(8);
    auto draw = [&](double mx, double my, int n) {
        std::vector<std::vector<double>> out;
        for (int i = 0; i < n; ++i) out.push_back({mx + 0.5 * rng.normal(), my + 0.5 * rng.normal(), rng.normal()});
        return out;
    };
    const auto pos = draw(2.0, 1.0, 100), neg = draw(-2.0, -1.0, 100);
    const auto clf = LogisticRegression::fit(pos, neg);
    const auto test_pos = draw(2.0, 1.0, 200), test_neg = draw(-2.0, -1.0, 200);
    int correct = 0;
    for (const auto& f : test_pos) correct += clf.probability(f) >= 0.5;
    for (const auto& f : test_neg) correct += clf.probability(f) < 0.5;
    CHECK(correct / 400.0 >= 0.95);
    const auto again = LogisticRegression::fit(pos, neg);
    CHECK(again.probability(test_pos[0]) == clf.probability(test_pos[0]));
    const auto back = LogisticRegression::from_json(clf.to_json());
    CHECK(back.probability(test_neg[3]) == doctest::Approx(clf.probability(test_neg[3])).epsilon(1e-12));
    CHECK_THROWS(LogisticRegression::fit(pos, {}));
    CHECK_THROWS(LogisticRegression::fit({}, neg));
}

TEST_CASE("quality classifier prefers sharp images") {
    Rng rng(9);
    std::vector<Image> sharp, soft;
    for (int i = 0; i < 20; ++i) {
        const Image img = random_image(16, 16, 3, rng);
        sharp.push_back(img);
        soft.push_back(degrade_toy(img, 1.5, 0.4));
    }
    const auto clf = QualityClassifier::train(sharp, soft);
    double ps = 0.0, pn = 0.0;
    for (int i = 0; i < 20; ++i) {
        const double a = clf.score(sharp[static_cast<std::size_t>(i)]);
        CHECK(a >= 0.0);
        CHECK(a <= 1.0);
        ps += a;
        pn += clf.score(soft[static_cast<std::size_t>(i)]);
    }
    CHECK(ps > pn);
    CHECK_THROWS(QualityClassifier::train(sharp, {}));
}

TEST_CASE("screening templates and response parsing") {
    CHECK(template_text(MllmTemplate::image_filter).find("passed the inspection") != std::string::npos);
    CHECK(template_text(MllmTemplate::text_filter).find("text prompts") != std::string::npos);
    CHECK(parse_mllm_template("image_filter") == MllmTemplate::image_filter);
    CHECK_THROWS(parse_mllm_template("video_filter"));

    const auto img = MllmTemplate::image_filter;
    CHECK(parse_screen_response("Yes, it passed the inspection.", img).pass == true);
    CHECK(parse_screen_response("  **No** - the hands are deformed", img).pass == false);
    CHECK_FALSE(parse_screen_response("I cannot tell.", img).pass.has_value());
    CHECK_FALSE(parse_screen_response("", img).pass.has_value());
    const auto txt = MllmTemplate::text_filter;
    CHECK(parse_screen_response("a red barn\na quiet lake", txt, "a quiet lake").pass == true);
    CHECK(parse_screen_response("a red barn", txt, "a quiet lake").pass == false);
    CHECK_FALSE(parse_screen_response("   ", txt, "a quiet lake").pass.has_value());
}

TEST_CASE("stub screening and veto semantics") {
    std::vector<ScreenItem> items;
    Rng rng(10);
    for (int i = 0; i < 6; ++i) items.push_back({"item" + std::to_string(i), "scene", random_image(8, 8, 3, rng), 0.9});
    StubMllmClient approve("yes, passed");
    const auto all = mllm_screen(items, approve, MllmTemplate::image_filter, 0.5);
    REQUIRE(all.size() == 6);
    for (const auto& v : all) {
        CHECK(v.mllm_pass == true);
        CHECK(v.kept);
    }
    REQUIRE(approve.requests().size() == 6);
    CHECK(approve.requests()[0].prompt == template_text(MllmTemplate::image_filter));
    CHECK(approve.requests()[0].image_png.has_value());

    items[3].classifier_prob = 0.99;
    StubMllmClient reject3("yes", {{"item3", "no, anomalous"}, {"item4", "unclear"}});
    const auto v = mllm_screen(items, reject3, MllmTemplate::image_filter, 0.5);
    CHECK(v[3].mllm_pass == false);
    CHECK_FALSE(v[3].kept);
    CHECK(v[4].undecided);
    CHECK_FALSE(v[4].kept);
    CHECK(v[5].kept);
    items[0].image.reset();
    CHECK_THROWS(mllm_screen(items, reject3, MllmTemplate::image_filter));

    TempDir dir("stub");
    {
        std::ofstream out(dir / "stub.json");
        out << R"({"default": "yes", "responses": {"item2": "no"}})";
    }
    auto file_stub = StubMllmClient::from_file(dir / "stub.json");
    items[0].image = items[1].image;
    const auto fv = mllm_screen(items, file_stub, MllmTemplate::image_filter);
    CHECK(fv[2].mllm_pass == false);
    CHECK(fv[1].mllm_pass == true);
}

TEST_CASE("http client posts the template and retries server errors") {
    httplib::Server server;
    std::atomic<int> calls{0};
    json last_body;
    server.Post("/v1/screen", [&](const httplib::Request& req, httplib::Response& res) {
        if (calls++ == 0) {
            res.status = 503;
            return;
        }
        last_body = json::parse(req.body);
        res.set_content(R"({"text": "yes, passed"})", "application/json");
    });
    server.Post("/plain", [](const httplib::Request&, httplib::Response& res) { res.set_content("no", "text/plain"); });
    server.Post("/missing", [](const httplib::Request&, httplib::Response& res) { res.status = 404; });
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread th([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    MllmRequest req{"cand000001", template_text(MllmTemplate::image_filter), std::vector<std::uint8_t>{1, 2, 3}};
    HttpMllmClient client("127.0.0.1", port, "/v1/screen", 2, 5.0);
    CHECK(client.send(req) == "yes, passed");
    CHECK(calls == 2);
    CHECK(last_body["item_id"] == "cand000001");
    CHECK(last_body["prompt"] == template_text(MllmTemplate::image_filter));
    CHECK(last_body["image_png_base64"] == "AQID");

    HttpMllmClient plain("127.0.0.1", port, "/plain", 0, 5.0);
    CHECK(plain.send(req) == "no");
    HttpMllmClient missing("127.0.0.1", port, "/missing", 3, 5.0);
    CHECK_THROWS_AS(missing.send(req), MllmTransportError);

    server.stop();
    th.join();
    HttpMllmClient dead("127.0.0.1", port, "/v1/screen", 1, 0.5);
    try {
        dead.send(req);
        FAIL("expected a transport error");
    } catch (const MllmTransportError& e) {
        CHECK(e.item_id() == "cand000001");
    }
    CHECK_THROWS(HttpMllmClient("127.0.0.1", port, "/", -1));
}

TEST_CASE("curate counting oracle and resume") {
    const CuratePlan plan = counting_plan();
    int oracle_above = 0, oracle_kept = 0;
    for (int i = 0; i < 100; ++i) {
        const bool above = plan.probs[static_cast<std::size_t>(i)] >= 0.5;
        oracle_above += above;
        oracle_kept += above && plan.rejected.count(i) == 0;
    }
    REQUIRE(oracle_above == 40);
    REQUIRE(oracle_kept == 35);

    TempDir dir("curate");
    StubMllmClient stub("yes", plan.responses());
    CurateConfig cfg{dir.path().string(), 0.5, 100};
    auto gen = [&](int i) { return plan.generate(i); };
    auto score = [&](const Image& img) { return plan.score(img); };
    const auto summary = curate(cfg, gen, score, stub);
    CHECK(summary.total == 100);
    CHECK(summary.above_threshold == 40);
    CHECK(summary.kept == 35);
    CHECK(stub.requests().size() == 40);

    const auto rows = read_manifest(dir / "manifest.jsonl");
    REQUIRE(rows.size() == 100);
    int kept = 0;
    for (const auto& v : rows) {
        CHECK(v.kept == (v.classifier_prob >= 0.5 && v.mllm_pass != false));
        if (v.kept) {
            ++kept;
            CHECK(std::filesystem::exists(dir.path() / v.image_path));
        }
    }
    CHECK(kept == 35);

    StubMllmClient again("yes", plan.responses());
    const auto resumed = curate(cfg, gen, score, again);
    CHECK(resumed.resumed == 100);
    CHECK(resumed.kept == 35);
    CHECK(again.requests().empty());
    CHECK(read_manifest(dir / "manifest.jsonl").size() == 100);

    TempDir partial("curate_partial");
    {
        std::ifstream in(dir / "manifest.jsonl");
        std::ofstream out(partial / "manifest.jsonl");
        std::string line;
        for (int i = 0; i < 50 && std::getline(in, line); ++i) out << line << '\n';
        out << "{\"image_id\": \"cand0000";  // torn write
    }
    StubMllmClient third("yes", plan.responses());
    CurateConfig pcfg{partial.path().string(), 0.5, 100};
    const auto finished = curate(pcfg, gen, score, third);
    CHECK(finished.resumed == 50);
    CHECK(finished.total == 100);
    CHECK(finished.kept == 35);
}

TEST_CASE("curate threshold endpoints") {
    const CuratePlan plan = counting_plan();
    auto gen = [&](int i) { return plan.generate(i); };
    auto score = [&](const Image& img) { return std::min(plan.score(img), 0.999); };
    TempDir a("curate_all"), b("curate_none");
    StubMllmClient approve("yes");
    CHECK(curate(CurateConfig{a.path().string(), 0.0, 100}, gen, score, approve).kept == 100);
    StubMllmClient any("yes");
    CHECK(curate(CurateConfig{b.path().string(), 1.0, 100}, gen, score, any).kept == 0);
    CHECK_THROWS(curate(CurateConfig{"", 0.5, 1}, gen, score, any));
    CHECK_THROWS(curate(CurateConfig{b.path().string(), 1.5, 1}, gen, score, any));
}

TEST_CASE("sign test") {
    CHECK(sign_test_p(0, 10) == 1.0);
    CHECK(sign_test_p(10, 10) == doctest::Approx(1.0 / 1024.0).epsilon(1e-12));
    CHECK(sign_test_p(5, 10) == doctest::Approx(638.0 / 1024.0).epsilon(1e-12));
    CHECK(sign_test_p(0, 0) == 1.0);
    CHECK(sign_test_p(115, 200) < 0.05);
    CHECK(sign_test_p(105, 200) > 0.05);
    CHECK_THROWS(sign_test_p(11, 10));
}

TEST_CASE("caption records") {
    CaptionRecord r{"img1", "a red barn", CaptionSource::mllm};
    const auto back = json(r).get<CaptionRecord>();
    CHECK(back.caption == "a red barn");
    CHECK(back.source == CaptionSource::mllm);
    CHECK_THROWS(CaptionRecord{"img2", "", CaptionSource::human}.validate());
    CHECK_THROWS(json::parse(R"({"image_id": "x", "caption": "c", "source": "robot"})").get<CaptionRecord>());
    CHECK_THROWS(json::parse(R"({"image_id": "x", "caption": ""})").get<CaptionRecord>());
}

}
