// Copyright (c) 2026 fedsim contributors
// SPDX-License-Identifier: Apache-2.0
//
// Fusion primitives and the multimodal classifier: masking semantics,
// parameter layout, determinism, and an end-to-end gradient check.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "fedsim/fedsim.hpp"

using namespace fedsim;

namespace {

Tensor make_rep(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = rows.begin()->size();
    Tensor t({r, c});
    std::size_t i = 0;
    for (const auto& row : rows) {
        std::size_t j = 0;
        for (double v : row) t.at(i, j++) = v;
        ++i;
    }
    return t;
}

DatasetManifest mixed_manifest() {
    DatasetManifest m;
    m.name = "mix";
    m.num_classes = 3;
    m.modalities = {{"sig", 2, 8, ModalityKind::Signal}, {"emb", 3, 2, ModalityKind::Embedding}};
    return m;
}

ModelConfig small_config() {
    ModelConfig c;
    c.encoder.conv_filters = {3};
    c.encoder.kernel = 3;
    c.encoder.stride = 1;
    c.encoder.hidden = 4;
    c.encoder.dropout = 0.0;
    c.fusion.scheme = FusionScheme::Concat;
    c.fusion.heads = 2;
    c.classifier_hidden = 5;
    return c;
}

Sample mixed_sample(const std::string& id, int label, double fill) {
    Sample s;
    s.id = id;
    s.client_id = "c0";
    s.label = label;
    s.split = Split::Train;
    Tensor sig({6, 2});
    for (std::size_t i = 0; i < sig.size(); ++i)
        sig[i] = std::sin(fill + 0.37 * static_cast<double>(i));
    Tensor emb({2, 3});
    for (std::size_t i = 0; i < emb.size(); ++i)
        emb[i] = std::cos(fill + 0.21 * static_cast<double>(i));
    s.modalities = {std::move(sig), std::move(emb)};
    s.available = {true, true};
    return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Concat fusion
// ---------------------------------------------------------------------------

TEST_CASE("concat fusion takes the temporal mean per modality") {
    std::vector<Tensor> reps = {make_rep({{1.0, 2.0}, {3.0, 4.0}}), make_rep({{10.0, 20.0}})};
    std::vector<std::vector<bool>> masks = {{true, true}, {true}};
    Tensor out = fuse_concat(reps, masks);
    REQUIRE(out.shape() == std::vector<std::size_t>{4});
    REQUIRE(out[0] == 2.0);
    REQUIRE(out[1] == 3.0);
    REQUIRE(out[2] == 10.0);
    REQUIRE(out[3] == 20.0);
}

TEST_CASE("concat fusion averages only unmasked rows") {
    std::vector<Tensor> reps = {make_rep({{1.0, 2.0}, {100.0, 200.0}})};
    std::vector<std::vector<bool>> masks = {{true, false}};
    Tensor out = fuse_concat(reps, masks);
    REQUIRE(out[0] == 1.0);
    REQUIRE(out[1] == 2.0);
}

TEST_CASE("concat fusion zero-fills a fully masked modality") {
    std::vector<Tensor> reps = {make_rep({{5.0, 6.0}}), make_rep({{7.0, 8.0}})};
    std::vector<std::vector<bool>> masks = {{false}, {true}};
    Tensor out = fuse_concat(reps, masks);
    REQUIRE(out[0] == 0.0);
    REQUIRE(out[1] == 0.0);
    REQUIRE(out[2] == 7.0);
    REQUIRE(out[3] == 8.0);
}

TEST_CASE("concat fusion validates its inputs") {
    REQUIRE_THROWS_AS(fuse_concat({}, {}), ContractError);
    std::vector<Tensor> reps = {make_rep({{1.0, 2.0}})};
    REQUIRE_THROWS_AS(fuse_concat(reps, {}), DimensionError);
    std::vector<std::vector<bool>> short_mask = {{true, true}};
    REQUIRE_THROWS_AS(fuse_concat(reps, short_mask), DimensionError);
    std::vector<Tensor> ragged = {make_rep({{1.0, 2.0}}), make_rep({{1.0, 2.0, 3.0}})};
    std::vector<std::vector<bool>> masks = {{true}, {true}};
    REQUIRE_THROWS_AS(fuse_concat(ragged, masks), DimensionError);
}

// ---------------------------------------------------------------------------
// Attention fusion
// ---------------------------------------------------------------------------

namespace {

struct AttnFixture {
    Tensor w{std::vector<std::size_t>{3, 3}};
    Tensor b{std::vector<std::size_t>{3}};
    std::vector<Tensor> context;

    AttnFixture() {
        Rng rng(123);
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-0.5, 0.5);
        for (std::size_t i = 0; i < b.size(); ++i) b[i] = rng.uniform(-0.5, 0.5);
        for (int k = 0; k < 2; ++k) {
            Tensor c({3});
            for (std::size_t i = 0; i < 3; ++i) c[i] = rng.uniform(-0.5, 0.5);
            context.push_back(std::move(c));
        }
    }
};

}  // namespace

TEST_CASE("attention over a single valid row returns that row per head") {
    AttnFixture f;
    std::vector<Tensor> reps = {make_rep({{0.3, -1.2, 0.9}}), make_rep({{4.0, 5.0, 6.0}})};
    std::vector<std::vector<bool>> masks = {{true}, {false}};
    Tensor out = fuse_attention(reps, masks, f.w, f.b, f.context);
    REQUIRE(out.shape() == std::vector<std::size_t>{6});
    for (std::size_t k = 0; k < 2; ++k) {
        REQUIRE(out[k * 3 + 0] == 0.3);
        REQUIRE(out[k * 3 + 1] == -1.2);
        REQUIRE(out[k * 3 + 2] == 0.9);
    }
}

TEST_CASE("attention output is bitwise invariant to masked row contents") {
    AttnFixture f;
    std::vector<Tensor> reps = {make_rep({{0.3, -1.2, 0.9}, {0.1, 0.2, 0.3}}),
                                make_rep({{1.0, -1.0, 0.5}})};
    std::vector<std::vector<bool>> masks = {{true, false}, {true}};
    Tensor base = fuse_attention(reps, masks, f.w, f.b, f.context);

    // Scribble over the masked row, including values that would wreck the
    // softmax if they were ever read.
    reps[0].at(1, 0) = 1e18;
    reps[0].at(1, 1) = -1e18;
    reps[0].at(1, 2) = 12345.0;
    Tensor poked = fuse_attention(reps, masks, f.w, f.b, f.context);
    REQUIRE(max_abs_diff(base, poked) == 0.0);
}

TEST_CASE("attention rejects a fully masked batch item") {
    AttnFixture f;
    std::vector<Tensor> reps = {make_rep({{0.3, -1.2, 0.9}}), make_rep({{1.0, -1.0, 0.5}})};
    std::vector<std::vector<bool>> masks = {{false}, {false}};
    REQUIRE_THROWS_AS(fuse_attention(reps, masks, f.w, f.b, f.context), DegenerateAttentionError);
}

TEST_CASE("attention weights form a distribution over valid rows") {
    AttnFixture f;
    std::vector<Tensor> reps = {make_rep({{0.3, -1.2, 0.9}, {0.1, 0.2, 0.3}}),
                                make_rep({{1.0, -1.0, 0.5}})};
    std::vector<std::vector<bool>> masks = {{true, false}, {true}};
    AttnTape tape;
    fuse_attention(reps, masks, f.w, f.b, f.context, &tape);

    REQUIRE(tape.a.extent(0) == 2);  // heads
    REQUIRE(tape.a.extent(1) == 3);  // stacked rows
    for (std::size_t k = 0; k < 2; ++k) {
        double sum = 0.0;
        for (std::size_t i = 0; i < 3; ++i) {
            const double a = tape.a.at(k, i);
            REQUIRE(a >= 0.0);
            sum += a;
        }
        REQUIRE(sum == Catch::Approx(1.0).margin(1e-12));
        REQUIRE(tape.a.at(k, 1) == 0.0);  // masked row: exactly zero weight
    }
}

TEST_CASE("attention heads concatenate independent single-head results") {
    AttnFixture f;
    std::vector<Tensor> reps = {make_rep({{0.4, 0.1, -0.7}, {0.9, -0.3, 0.2}})};
    std::vector<std::vector<bool>> masks = {{true, true}};
    Tensor both = fuse_attention(reps, masks, f.w, f.b, f.context);
    for (std::size_t k = 0; k < 2; ++k) {
        Tensor solo = fuse_attention(reps, masks, f.w, f.b, {f.context[k]});
        for (std::size_t j = 0; j < 3; ++j) REQUIRE(both[k * 3 + j] == solo[j]);
    }
}

TEST_CASE("attention validates shapes") {
    AttnFixture f;
    std::vector<Tensor> reps = {make_rep({{0.4, 0.1, -0.7}})};
    std::vector<std::vector<bool>> masks = {{true}};
    REQUIRE_THROWS_AS(fuse_attention({}, {}, f.w, f.b, f.context), ContractError);
    REQUIRE_THROWS_AS(fuse_attention(reps, masks, f.w, f.b, {}), ContractError);
    Tensor bad_w({3, 2});
    REQUIRE_THROWS_AS(fuse_attention(reps, masks, bad_w, f.b, f.context), DimensionError);
    Tensor bad_b({2});
    REQUIRE_THROWS_AS(fuse_attention(reps, masks, f.w, bad_b, f.context), DimensionError);
    std::vector<Tensor> bad_ctx = {Tensor({2})};
    REQUIRE_THROWS_AS(fuse_attention(reps, masks, f.w, f.b, bad_ctx), DimensionError);
}

// ---------------------------------------------------------------------------
// Classifier construction
// ---------------------------------------------------------------------------

TEST_CASE("model initialization is deterministic in the seed") {
    auto manifest = mixed_manifest();
    auto config = small_config();
    MultimodalClassifier a(manifest, config, 11);
    MultimodalClassifier b(manifest, config, 11);
    REQUIRE(max_abs_diff(a.params(), b.params()) == 0.0);
    MultimodalClassifier c(manifest, config, 12);
    REQUIRE(max_abs_diff(a.params(), c.params()) > 0.0);
}

TEST_CASE("parameter layout covers encoders, fusion, and classifier") {
    auto manifest = mixed_manifest();
    auto config = small_config();
    MultimodalClassifier model(manifest, config, 0);
    const ParamSet& p = model.params();

    // Signal modality gets the conv front end; embedding modality does not.
    REQUIRE_NOTHROW(p.at("enc.sig.conv0.w"));
    REQUIRE_THROWS_AS(p.at("enc.emb.conv0.w"), ContractError);
    for (const char* n : {"wz", "wr", "wn", "uz", "ur", "un", "bz", "br", "bn"}) {
        REQUIRE_NOTHROW(p.at("enc.sig.gru." + std::string(n)));
        REQUIRE_NOTHROW(p.at("enc.emb.gru." + std::string(n)));
    }
    REQUIRE_NOTHROW(p.at("cls.fc1.w"));
    REQUIRE_NOTHROW(p.at("cls.fc2.b"));
    // Concat fusion has no parameters of its own.
    REQUIRE_THROWS_AS(p.at("fusion.w"), ContractError);

    REQUIRE(p.at("enc.sig.conv0.w").shape() == std::vector<std::size_t>{3, 2, 3});
    REQUIRE(p.at("enc.sig.gru.wz").shape() == std::vector<std::size_t>{4, 3});
    REQUIRE(p.at("enc.emb.gru.wz").shape() == std::vector<std::size_t>{4, 3});
    REQUIRE(p.at("cls.fc1.w").shape() == std::vector<std::size_t>{5, 8});
    REQUIRE(p.at("cls.fc2.w").shape() == std::vector<std::size_t>{3, 5});
    REQUIRE(model.fused_dim() == 8);  // 2 modalities x hidden 4

    auto attn_cfg = config;
    attn_cfg.fusion.scheme = FusionScheme::Attention;
    MultimodalClassifier attn(manifest, attn_cfg, 0);
    REQUIRE_NOTHROW(attn.params().at("fusion.w"));
    REQUIRE_NOTHROW(attn.params().at("fusion.c0"));
    REQUIRE_NOTHROW(attn.params().at("fusion.c1"));
    REQUIRE(attn.fused_dim() == 8);  // 2 heads x hidden 4
    REQUIRE(attn.params().at("cls.fc1.w").shape() == std::vector<std::size_t>{5, 8});
}

TEST_CASE("unimodal builds restrict the encoder set") {
    auto manifest = mixed_manifest();
    auto config = small_config();
    MultimodalClassifier uni = MultimodalClassifier::build_unimodal(manifest, config, "emb", 3);
    REQUIRE_NOTHROW(uni.params().at("enc.emb.gru.wz"));
    REQUIRE_THROWS_AS(uni.params().at("enc.sig.gru.wz"), ContractError);
    REQUIRE(uni.fused_dim() == 4);  // one modality x hidden 4

    REQUIRE_THROWS_AS(MultimodalClassifier::build_unimodal(manifest, config, "video", 3),
                      ConfigError);
}

TEST_CASE("model config validation rejects bad hyperparameters") {
    auto manifest = mixed_manifest();
    auto config = small_config();
    config.encoder.kernel = 4;  // even
    REQUIRE_THROWS_AS(MultimodalClassifier(manifest, config, 0), ConfigError);
    config = small_config();
    config.encoder.dropout = 1.0;
    REQUIRE_THROWS_AS(MultimodalClassifier(manifest, config, 0), ConfigError);
    config = small_config();
    config.fusion.heads = 0;
    REQUIRE_THROWS_AS(MultimodalClassifier(manifest, config, 0), ConfigError);
    config = small_config();
    config.classifier_hidden = 0;
    REQUIRE_THROWS_AS(MultimodalClassifier(manifest, config, 0), ConfigError);
}

// ---------------------------------------------------------------------------
// Forward semantics
// ---------------------------------------------------------------------------

TEST_CASE("prediction breaks ties toward the lowest class index") {
    Tensor logits({2, 3});
    logits.at(0, 0) = 1.0;
    logits.at(0, 1) = 1.0;
    logits.at(0, 2) = 0.0;
    logits.at(1, 0) = -1.0;
    logits.at(1, 1) = 0.5;
    logits.at(1, 2) = 0.5;
    auto pred = MultimodalClassifier::predict(logits);
    REQUIRE(pred == std::vector<int>{0, 1});
}

TEST_CASE("an unavailable modality contributes a zero block under concat fusion") {
    auto manifest = mixed_manifest();
    auto config = small_config();
    MultimodalClassifier model(manifest, config, 5);

    Sample s = mixed_sample("x", 1, 0.4);
    BatchItem item = uncorrupted_item(s);
    item.available[0] = false;  // drop the signal modality

    ModelTape tape;
    ForwardOptions opts;
    (void)model.forward_loss({item}, opts, &tape);
    for (std::size_t j = 0; j < 4; ++j) REQUIRE(tape.fused.at(0, j) == 0.0);
    bool emb_live = false;
    for (std::size_t j = 4; j < 8; ++j)
        if (tape.fused.at(0, j) != 0.0) emb_live = true;
    REQUIRE(emb_live);
}

TEST_CASE("train mode with dropout demands an rng and eval mode ignores it") {
    auto manifest = mixed_manifest();
    auto config = small_config();
    config.encoder.dropout = 0.5;
    MultimodalClassifier model(manifest, config, 5);
    Sample s = mixed_sample("x", 1, 0.4);
    Batch batch = {uncorrupted_item(s)};

    ForwardOptions train_opts;
    train_opts.mode = Mode::Train;
    REQUIRE_THROWS_AS(model.forward_loss(batch, train_opts), ContractError);

    ForwardOptions eval_opts;  // Eval is the default; no rng required
    REQUIRE_NOTHROW(model.forward_loss(batch, eval_opts));

    // With an rng supplied, a replayed stream reproduces the same loss.
    Rng r1(9), r2(9);
    train_opts.dropout_rng = &r1;
    const double l1 = model.forward_loss(batch, train_opts).loss;
    train_opts.dropout_rng = &r2;
    const double l2 = model.forward_loss(batch, train_opts).loss;
    REQUIRE(l1 == l2);
}

TEST_CASE("unit logit scaling is bitwise inert and real scaling multiplies") {
    auto manifest = mixed_manifest();
    auto config = small_config();
    MultimodalClassifier model(manifest, config, 5);
    Sample s = mixed_sample("x", 2, 1.7);
    Batch batch = {uncorrupted_item(s)};

    Tensor plain = model.logits(batch);

    std::vector<double> unit(3, 1.0);
    ForwardOptions opts;
    opts.logit_scale = &unit;
    ModelTape tape;
    Tensor scaled = model.forward_loss(batch, opts, &tape).logits;
    REQUIRE(max_abs_diff(plain, scaled) == 0.0);

    std::vector<double> halved = {1.0, 0.5, 1.0};
    opts.logit_scale = &halved;
    Tensor shrunk = model.forward_loss(batch, opts, &tape).logits;
    REQUIRE(shrunk.at(0, 0) == plain.at(0, 0));
    REQUIRE(shrunk.at(0, 1) == 0.5 * plain.at(0, 1));
    REQUIRE(shrunk.at(0, 2) == plain.at(0, 2));

    std::vector<double> wrong_len = {1.0, 1.0};
    opts.logit_scale = &wrong_len;
    REQUIRE_THROWS_AS(model.forward_loss(batch, opts), DimensionError);
}

TEST_CASE("forward rejects unlabeled or malformed batches") {
    auto manifest = mixed_manifest();
    auto config = small_config();
    MultimodalClassifier model(manifest, config, 5);
    REQUIRE_THROWS_AS(model.forward_loss({}, ForwardOptions{}), ContractError);

    Sample s = mixed_sample("x", 1, 0.4);
    BatchItem unlabeled = uncorrupted_item(s);
    unlabeled.label.reset();
    REQUIRE_THROWS_AS(model.forward_loss({unlabeled}, ForwardOptions{}), ContractError);

    // logits() runs unlabeled fine: it never touches labels.
    REQUIRE_NOTHROW(model.logits({unlabeled}));
}

// ---------------------------------------------------------------------------
// End-to-end gradients
// ---------------------------------------------------------------------------

TEST_CASE("analytic model gradients agree with finite differences") {
    auto manifest = mixed_manifest();
    for (FusionScheme scheme : {FusionScheme::Concat, FusionScheme::Attention}) {
        auto config = small_config();
        config.fusion.scheme = scheme;
        MultimodalClassifier model(manifest, config, 17);

        Sample s0 = mixed_sample("a", 0, 0.3);
        Sample s1 = mixed_sample("b", 2, -1.1);
        Batch batch = {uncorrupted_item(s0), uncorrupted_item(s1)};
        batch[1].available[0] = false;  // exercise the masked path too

        ModelTape tape;
        ForwardOptions opts;
        opts.mode = Mode::Train;
        (void)model.forward_loss(batch, opts, &tape);
        GradSet analytic = model.backward(tape);

        auto loss_fn = [&](const ParamSet& p) {
            model.params() = p;
            return model.forward_loss(batch, opts).loss;
        };
        ParamSet at = model.params();
        const double rel = finite_diff_check(loss_fn, at, analytic, 1e-4);
        model.params() = at;  // restore
        INFO("scheme " << to_string(scheme));
        REQUIRE(rel < 1e-4);
    }
}
