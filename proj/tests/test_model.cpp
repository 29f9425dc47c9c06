#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "ks/lora.hpp"
#include "ks/model.hpp"

using namespace ks;

namespace {

ModelConfig tiny_config(std::uint64_t seed = 7) {
    ModelConfig c;
    c.num_blocks = 2;
    c.embed_dim = 8;
    c.num_heads = 2;
    c.ffn_hidden = 12;
    c.seq_len = 4;
    c.input_dim = 3;
    c.num_classes = 5;
    c.seed = seed;
    return c;
}

Tensor random_batch(const ModelConfig& c, std::size_t b, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<double> v(b * c.seq_len * c.input_dim);
    for (double& x : v) x = dist(rng);
    return Tensor::from({b, c.seq_len * c.input_dim}, std::move(v));
}

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("build is deterministic per seed and validates config") {
    TransformerClassifier a(tiny_config(42));
    TransformerClassifier b(tiny_config(42));
    auto pa = a.named_parameters(), pb = b.named_parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].second.data() == pb[i].second.data());

    TransformerClassifier c(tiny_config(43));
    CHECK(c.token_embed().data() != a.token_embed().data());

    ModelConfig bad = tiny_config();
    bad.num_heads = 3;  // 8 % 3 != 0
    CHECK_THROWS_AS(TransformerClassifier{bad}, ConfigError);
}

TEST_CASE("structure: K blocks, FFN shapes, closed-form parameter count") {
    ModelConfig c = tiny_config();
    TransformerClassifier m(c);
    REQUIRE(m.blocks().size() == 2);
    for (const auto& b : m.blocks()) {
        CHECK(b.ffn_w1.shape() == std::vector<std::size_t>{c.embed_dim, c.ffn_hidden});
        CHECK(b.ffn_w2.shape() == std::vector<std::size_t>{c.ffn_hidden, c.embed_dim});
    }
    CHECK(m.parameter_count() == expected_parameter_count(c));
}

TEST_CASE("ffn_forward: zero input with zero b1 broadcasts b2") {
    ModelConfig c = tiny_config();
    TransformerClassifier m(c);
    auto& b2 = m.blocks()[0].ffn_b2.mutable_data();
    for (std::size_t j = 0; j < b2.size(); ++j) b2[j] = 0.1 * static_cast<double>(j);
    Tensor x = Tensor::zeros({3, c.embed_dim});
    Tensor y = m.ffn_forward(x, 0);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < c.embed_dim; ++j)
            CHECK(y.data()[i * c.embed_dim + j] == doctest::Approx(b2[j]).epsilon(1e-12));
}

TEST_CASE("ffn_forward: all-negative pre-activations clamp to b2") {
    ModelConfig c = tiny_config();
    TransformerClassifier m(c);
    for (double& v : m.blocks()[1].ffn_b1.mutable_data()) v = -100.0;
    Tensor x = random_batch(c, 1, 5);
    Tensor flat = Tensor::from({c.seq_len, c.embed_dim},
                               std::vector<double>(c.seq_len * c.embed_dim, 0.5));
    Tensor y = m.ffn_forward(flat, 1);
    const auto& b2 = m.blocks()[1].ffn_b2.data();
    for (std::size_t i = 0; i < c.seq_len; ++i)
        for (std::size_t j = 0; j < c.embed_dim; ++j)
            CHECK(y.data()[i * c.embed_dim + j] == doctest::Approx(b2[j]).epsilon(1e-12));
}

TEST_CASE("ffn_forward matches explicit loop oracle") {
    ModelConfig c = tiny_config();
    c.embed_dim = 2;
    c.ffn_hidden = 3;
    c.num_heads = 1;
    TransformerClassifier m(c);
    m.blocks()[0].ffn_w1.mutable_data() = {1, -2, 0.5, 3, 0, -1};
    m.blocks()[0].ffn_b1.mutable_data() = {0.1, -0.2, 0.3};
    m.blocks()[0].ffn_w2.mutable_data() = {1, 2, -1, 0.5, 0, 3};
    m.blocks()[0].ffn_b2.mutable_data() = {-0.5, 0.25};
    Tensor x = Tensor::from({1, 2}, {0.7, -0.3});
    Tensor y = m.ffn_forward(x, 0);

    double hidden[3];
    const auto& w1 = m.blocks()[0].ffn_w1.data();
    for (int h = 0; h < 3; ++h)
        hidden[h] = std::max(0.0, 0.7 * w1[h] + (-0.3) * w1[3 + h] +
                                      m.blocks()[0].ffn_b1.data()[h]);
    const auto& w2 = m.blocks()[0].ffn_w2.data();
    for (int o = 0; o < 2; ++o) {
        double expect = m.blocks()[0].ffn_b2.data()[o];
        for (int h = 0; h < 3; ++h) expect += hidden[h] * w2[h * 2 + o];
        CHECK(y.data()[o] == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("forward: shape contract, batch independence, loop-of-singletons oracle") {
    ModelConfig c = tiny_config();
    TransformerClassifier m(c);
    Tensor batch = random_batch(c, 4, 9);
    Tensor logits = m.forward(batch);
    CHECK(logits.shape() == std::vector<std::size_t>{4, c.num_classes});

    // permuted batch permutes logit rows
    const std::size_t w = c.seq_len * c.input_dim;
    std::vector<double> perm(batch.data().size());
    const std::vector<std::size_t> order{2, 0, 3, 1};
    for (std::size_t i = 0; i < 4; ++i)
        std::copy_n(batch.data().begin() + static_cast<std::ptrdiff_t>(order[i] * w), w,
                    perm.begin() + static_cast<std::ptrdiff_t>(i * w));
    Tensor permuted_logits = m.forward(Tensor::from({4, w}, perm));
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < c.num_classes; ++j)
            CHECK(permuted_logits.data()[i * c.num_classes + j] ==
                  doctest::Approx(logits.data()[order[i] * c.num_classes + j]).epsilon(1e-12));

    // per-example loop
    for (std::size_t i = 0; i < 4; ++i) {
        std::vector<double> one(batch.data().begin() + static_cast<std::ptrdiff_t>(i * w),
                                batch.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * w));
        Tensor single = m.forward(Tensor::from({1, w}, one));
        for (std::size_t j = 0; j < c.num_classes; ++j)
            CHECK(single.data()[j] ==
                  doctest::Approx(logits.data()[i * c.num_classes + j]).epsilon(1e-10));
    }

    // repeated calls bitwise identical
    CHECK(m.forward(batch).data() == logits.data());

    CHECK_THROWS_AS(m.forward(Tensor::zeros({2, w + 1})), ShapeError);
}

TEST_CASE("checkpoint: save/load round trip, idempotence, corruption detection") {
    ModelConfig c = tiny_config(11);
    TransformerClassifier m(c);
    const std::string p1 = tmp_path("ks_test_ckpt_1.bin");
    const std::string p2 = tmp_path("ks_test_ckpt_2.bin");
    save_checkpoint(m, p1, "Start");
    LoadedCheckpoint loaded = load_checkpoint(p1);
    CHECK(loaded.meta.stage_label == "Start");
    save_checkpoint(loaded.model, p2, "Start");

    auto slurp = [](const std::string& p) {
        std::ifstream in(p, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(in)),
                           std::istreambuf_iterator<char>());
    };
    CHECK(slurp(p1) == slurp(p2));

    // logits survive the 32-bit round trip
    Tensor batch = random_batch(c, 3, 21);
    Tensor before = m.forward(batch);
    Tensor after = loaded.model.forward(batch);
    for (std::size_t i = 0; i < before.size(); ++i)
        CHECK(std::abs(before.data()[i] - after.data()[i]) < 1e-5);

    // corrupt one manifest shape: error names the tensor
    std::string raw = slurp(p1);
    const std::string needle = "\"name\":\"embed.token\",\"offset\":0,\"shape\":[3,8]";
    auto pos = raw.find(needle);
    REQUIRE(pos != std::string::npos);
    std::string bad = raw;
    bad.replace(pos, needle.size(), "\"name\":\"embed.token\",\"offset\":0,\"shape\":[3,9]");
    const std::string p3 = tmp_path("ks_test_ckpt_3.bin");
    // manifest length unchanged, so the header stays valid
    std::ofstream(p3, std::ios::binary) << bad;
    CHECK_THROWS_WITH_AS(load_checkpoint(p3), doctest::Contains("embed.token"), IoError);

    CHECK_THROWS_AS(load_checkpoint(tmp_path("ks_no_such_file.bin")), IoError);
    std::filesystem::remove(p1);
    std::filesystem::remove(p2);
    std::filesystem::remove(p3);
}

TEST_CASE("snapshots: identity without steps, targeted perturbation, layer count") {
    ModelConfig c = tiny_config();
    TransformerClassifier m(c);
    StageSnapshot s1 = snapshot_weights(m, "a");
    StageSnapshot s2 = snapshot_weights(m, "b");
    REQUIRE(s1.layer_names == s2.layer_names);
    CHECK(s1.layer_names.size() == m.named_parameters().size());
    for (std::size_t i = 0; i < s1.weights.size(); ++i) CHECK(s1.weights[i] == s2.weights[i]);

    m.blocks()[1].wq.mutable_data()[3] += 0.5;
    StageSnapshot s3 = snapshot_weights(m, "c");
    std::size_t diffs = 0;
    for (std::size_t i = 0; i < s1.weights.size(); ++i)
        if (s1.weights[i] != s3.weights[i]) {
            ++diffs;
            CHECK(s1.layer_names[i] == "block1.attn.wq");
        }
    CHECK(diffs == 1);
}

TEST_CASE("forward is unchanged by fresh adapters (B = 0)") {
    ModelConfig c = tiny_config(3);
    TransformerClassifier m(c);
    Tensor batch = random_batch(c, 2, 31);
    Tensor base = m.forward(batch);
    AdapterSet set = attach_adapters(m, 2, 99);
    Tensor adapted = m.forward(batch, &set);
    for (std::size_t i = 0; i < base.size(); ++i)
        CHECK(std::abs(base.data()[i] - adapted.data()[i]) < 1e-9);
}
