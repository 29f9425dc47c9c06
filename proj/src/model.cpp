#include "ks/model.hpp"

#include <cstring>
#include <fstream>
#include <random>

#include <json.hpp>

#include "ks/lora.hpp"

namespace ks {

namespace {

constexpr char kMagic[8] = {'K', 'S', 'C', 'H', 'K', 'P', 'T', '1'};
constexpr int kFormatVersion = 1;

Tensor gaussian_param(std::vector<std::size_t> shape, std::mt19937_64& rng, double std_dev) {
    std::normal_distribution<double> dist(0.0, std_dev);
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    std::vector<double> data(n);
    for (double& v : data) v = dist(rng);
    return Tensor::param(std::move(shape), std::move(data));
}

Tensor const_param(std::vector<std::size_t> shape, double fill) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return Tensor::param(std::move(shape), std::vector<double>(n, fill));
}

}  // namespace

void ModelConfig::validate() const {
    if (num_blocks < 1 || embed_dim < 1 || num_heads < 1 || ffn_hidden < 1 ||
        seq_len < 1 || input_dim < 1 || num_classes < 1)
        throw ConfigError("model config: all dimensions must be >= 1");
    if (embed_dim % num_heads != 0)
        throw ConfigError("model config: embed_dim " + std::to_string(embed_dim) +
                          " not divisible by num_heads " + std::to_string(num_heads));
}

TransformerClassifier::TransformerClassifier(const ModelConfig& config) : config_(config) {
    config.validate();
    std::mt19937_64 rng(config.seed);
    const std::size_t d = config.embed_dim, f = config.ffn_hidden;
    token_embed_ = gaussian_param({config.input_dim, d}, rng, 0.02);
    pos_embed_ = gaussian_param({config.seq_len, d}, rng, 0.02);
    blocks_.reserve(config.num_blocks);
    for (std::size_t k = 0; k < config.num_blocks; ++k) {
        Block b;
        b.ln1_scale = const_param({1, d}, 1.0);
        b.ln1_shift = const_param({1, d}, 0.0);
        b.wq = gaussian_param({d, d}, rng, 0.02);
        b.bq = const_param({1, d}, 0.0);
        b.wk = gaussian_param({d, d}, rng, 0.02);
        b.bk = const_param({1, d}, 0.0);
        b.wv = gaussian_param({d, d}, rng, 0.02);
        b.bv = const_param({1, d}, 0.0);
        b.wo = gaussian_param({d, d}, rng, 0.02);
        b.bo = const_param({1, d}, 0.0);
        b.ln2_scale = const_param({1, d}, 1.0);
        b.ln2_shift = const_param({1, d}, 0.0);
        b.ffn_w1 = gaussian_param({d, f}, rng, 0.02);
        b.ffn_b1 = const_param({1, f}, 0.0);
        b.ffn_w2 = gaussian_param({f, d}, rng, 0.02);
        b.ffn_b2 = const_param({1, d}, 0.0);
        blocks_.push_back(std::move(b));
    }
    final_ln_scale_ = const_param({1, d}, 1.0);
    final_ln_shift_ = const_param({1, d}, 0.0);
    head_weight_ = gaussian_param({d, config.num_classes}, rng, 0.02);
    head_bias_ = const_param({1, config.num_classes}, 0.0);
}

std::vector<std::pair<std::string, Tensor>> TransformerClassifier::named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("embed.token", token_embed_);
    out.emplace_back("embed.pos", pos_embed_);
    for (std::size_t k = 0; k < blocks_.size(); ++k) {
        const std::string p = "block" + std::to_string(k) + ".";
        const Block& b = blocks_[k];
        out.emplace_back(p + "ln1.scale", b.ln1_scale);
        out.emplace_back(p + "ln1.shift", b.ln1_shift);
        out.emplace_back(p + "attn.wq", b.wq);
        out.emplace_back(p + "attn.bq", b.bq);
        out.emplace_back(p + "attn.wk", b.wk);
        out.emplace_back(p + "attn.bk", b.bk);
        out.emplace_back(p + "attn.wv", b.wv);
        out.emplace_back(p + "attn.bv", b.bv);
        out.emplace_back(p + "attn.wo", b.wo);
        out.emplace_back(p + "attn.bo", b.bo);
        out.emplace_back(p + "ln2.scale", b.ln2_scale);
        out.emplace_back(p + "ln2.shift", b.ln2_shift);
        out.emplace_back(p + "ffn.w1", b.ffn_w1);
        out.emplace_back(p + "ffn.b1", b.ffn_b1);
        out.emplace_back(p + "ffn.w2", b.ffn_w2);
        out.emplace_back(p + "ffn.b2", b.ffn_b2);
    }
    out.emplace_back("final_ln.scale", final_ln_scale_);
    out.emplace_back("final_ln.shift", final_ln_shift_);
    out.emplace_back("head.w", head_weight_);
    out.emplace_back("head.b", head_bias_);
    return out;
}

Tensor TransformerClassifier::parameter(const std::string& name) const {
    for (auto& [n, t] : named_parameters())
        if (n == name) return t;
    throw ContractError("unknown parameter name: " + name);
}

std::size_t TransformerClassifier::parameter_count() const {
    std::size_t n = 0;
    for (auto& [name, t] : named_parameters()) n += t.size();
    return n;
}

std::size_t expected_parameter_count(const ModelConfig& c) {
    const std::size_t d = c.embed_dim, f = c.ffn_hidden;
    std::size_t per_block = 2 * d                 // ln1
                            + 4 * (d * d + d)     // q,k,v,o
                            + 2 * d               // ln2
                            + d * f + f + f * d + d;  // ffn
    return c.input_dim * d + c.seq_len * d + c.num_blocks * per_block + 2 * d +
           d * c.num_classes + c.num_classes;
}

Tensor TransformerClassifier::ffn_forward(const Tensor& x, std::size_t block,
                                          const AdapterSet* adapters) const {
    if (block >= blocks_.size())
        throw ContractError("block index " + std::to_string(block) + " out of range");
    const Block& b = blocks_[block];
    Tensor w1 = b.ffn_w1, w2 = b.ffn_w2;
    if (adapters) {
        const std::string p = "block" + std::to_string(block) + ".ffn.";
        if (const LoraAdapter* a1 = adapters->find(p + "w1")) w1 = effective_weight(*a1, w1);
        if (const LoraAdapter* a2 = adapters->find(p + "w2")) w2 = effective_weight(*a2, w2);
    }
    Tensor hidden = relu(add_rows_tiled(matmul(x, w1), b.ffn_b1));
    return add_rows_tiled(matmul(hidden, w2), b.ffn_b2);
}

Tensor TransformerClassifier::forward(const Tensor& batch, const AdapterSet* adapters) const {
    const std::size_t t = config_.seq_len, in = config_.input_dim, d = config_.embed_dim;
    if (batch.shape().size() != 2 || batch.cols() != t * in)
        throw ShapeError("forward expects B×(T·input_dim) batch with row width " +
                         std::to_string(t * in));
    const std::size_t bsz = batch.rows();
    // B×(T·in) row-major is the same buffer as (B·T)×in
    Tensor tokens = Tensor::from({bsz * t, in}, batch.data());
    Tensor h = add_rows_tiled(matmul(tokens, token_embed_), pos_embed_);
    for (std::size_t k = 0; k < blocks_.size(); ++k) {
        const Block& b = blocks_[k];
        Tensor a = layer_norm(h, b.ln1_scale, b.ln1_shift);
        Tensor q = add_rows_tiled(matmul(a, b.wq), b.bq);
        Tensor key = add_rows_tiled(matmul(a, b.wk), b.bk);
        Tensor v = add_rows_tiled(matmul(a, b.wv), b.bv);
        Tensor attn = multihead_attention(q, key, v, bsz, t, config_.num_heads);
        h = add(h, add_rows_tiled(matmul(attn, b.wo), b.bo));
        Tensor f = layer_norm(h, b.ln2_scale, b.ln2_shift);
        h = add(h, ffn_forward(f, k, adapters));
    }
    h = layer_norm(h, final_ln_scale_, final_ln_shift_);
    Tensor pooled = mean_pool(h, bsz, t);
    (void)d;
    return add_rows_tiled(matmul(pooled, head_weight_), head_bias_);
}

void TransformerClassifier::set_all_trainable(bool trainable) {
    for (auto& [name, t] : named_parameters()) {
        Tensor tt = t;
        tt.set_requires_grad(trainable);
    }
}

StageSnapshot snapshot_weights(const TransformerClassifier& model,
                               const std::string& stage_label, const AdapterSet* adapters) {
    StageSnapshot snap;
    snap.stage_label = stage_label;
    std::size_t depth = 0;
    for (auto& [name, t] : model.named_parameters()) {
        std::vector<double> w = t.data();
        if (adapters) {
            if (const LoraAdapter* a = adapters->find(name); a && a->enabled) {
                // fold ΔW = A·B into the copy
                const std::size_t rows = a->A.rows(), r = a->A.cols(), cols = a->B.cols();
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t p = 0; p < r; ++p) {
                        const double av = a->A.data()[i * r + p];
                        if (av == 0.0) continue;
                        for (std::size_t j = 0; j < cols; ++j)
                            w[i * cols + j] += av * a->B.data()[p * cols + j];
                    }
            }
        }
        snap.layer_names.push_back(name);
        snap.depth_indices.push_back(depth++);
        snap.weights.push_back(std::move(w));
    }
    return snap;
}

// --- checkpoint io -----------------------------------------------------------

namespace {

nlohmann::json config_to_json(const ModelConfig& c) {
    return {{"num_blocks", c.num_blocks},   {"embed_dim", c.embed_dim},
            {"num_heads", c.num_heads},     {"ffn_hidden", c.ffn_hidden},
            {"seq_len", c.seq_len},         {"input_dim", c.input_dim},
            {"num_classes", c.num_classes}, {"seed", c.seed}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.num_blocks = j.at("num_blocks").get<std::size_t>();
    c.embed_dim = j.at("embed_dim").get<std::size_t>();
    c.num_heads = j.at("num_heads").get<std::size_t>();
    c.ffn_hidden = j.at("ffn_hidden").get<std::size_t>();
    c.seq_len = j.at("seq_len").get<std::size_t>();
    c.input_dim = j.at("input_dim").get<std::size_t>();
    c.num_classes = j.at("num_classes").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

void append_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

}  // namespace

void save_checkpoint(const TransformerClassifier& model, const std::string& path,
                     const std::string& stage_label, const AdapterSet* adapters) {
    std::vector<std::pair<std::string, Tensor>> tensors = model.named_parameters();
    if (adapters) {
        for (const LoraAdapter& a : adapters->adapters()) {
            tensors.emplace_back("lora." + a.target + ".A", a.A);
            tensors.emplace_back("lora." + a.target + ".B", a.B);
        }
    }
    nlohmann::json manifest;
    manifest["version"] = kFormatVersion;
    manifest["config"] = config_to_json(model.config());
    manifest["stage"] = stage_label;
    manifest["seed"] = model.config().seed;
    manifest["lora_rank"] = adapters ? adapters->rank() : 0;
    nlohmann::json table = nlohmann::json::array();
    std::uint64_t offset = 0;
    std::string blob;
    for (auto& [name, t] : tensors) {
        table.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
        for (double v : t.data()) {
            float f = static_cast<float>(v);
            char buf[4];
            std::memcpy(buf, &f, 4);
            blob.append(buf, 4);
        }
        offset += t.size() * 4;
    }
    manifest["tensors"] = std::move(table);
    const std::string mstr = manifest.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path);
    std::string header(kMagic, 8);
    append_u64_le(header, mstr.size());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw IoError("checkpoint write failed: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
        throw IoError("bad checkpoint magic in " + path);
    char lenbuf[8];
    if (!in.read(lenbuf, 8)) throw IoError("truncated checkpoint header in " + path);
    std::uint64_t mlen = 0;
    for (int i = 0; i < 8; ++i)
        mlen |= static_cast<std::uint64_t>(static_cast<unsigned char>(lenbuf[i])) << (8 * i);
    std::string mstr(mlen, '\0');
    if (!in.read(mstr.data(), static_cast<std::streamsize>(mlen)))
        throw IoError("truncated checkpoint manifest in " + path);
    nlohmann::json manifest = nlohmann::json::parse(mstr, nullptr, false);
    if (manifest.is_discarded()) throw IoError("unparseable checkpoint manifest in " + path);
    if (manifest.at("version").get<int>() != kFormatVersion)
        throw IoError("unsupported checkpoint version " +
                      manifest.at("version").dump() + " in " + path);

    std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    LoadedCheckpoint result{TransformerClassifier(config_from_json(manifest.at("config"))), {}, {}};
    result.meta.config = result.model.config();
    result.meta.stage_label = manifest.at("stage").get<std::string>();
    result.meta.seed = manifest.at("seed").get<std::uint64_t>();
    result.meta.lora_rank = manifest.at("lora_rank").get<std::size_t>();

    std::uint64_t expected_bytes = 0;
    for (const auto& entry : manifest.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
        const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        expected_bytes += n * 4;
        if (offset + n * 4 > blob.size())
            throw IoError("tensor '" + name + "' overruns checkpoint blob in " + path);
        std::vector<double> data(n);
        for (std::size_t i = 0; i < n; ++i) {
            float f;
            std::memcpy(&f, blob.data() + offset + i * 4, 4);
            data[i] = static_cast<double>(f);
        }
        if (name.rfind("lora.", 0) == 0) {
            result.lora_tensors.emplace_back(name, Tensor::from(shape, std::move(data)));
            continue;
        }
        Tensor dst;
        try {
            dst = result.model.parameter(name);
        } catch (const ContractError&) {
            throw IoError("unknown tensor name '" + name + "' in " + path);
        }
        if (dst.shape() != shape)
            throw IoError("tensor '" + name + "' shape mismatch against config in " + path);
        dst.mutable_data() = std::move(data);
    }
    if (blob.size() != expected_bytes)
        throw IoError("checkpoint blob length " + std::to_string(blob.size()) +
                      " does not match manifest total " + std::to_string(expected_bytes) +
                      " in " + path);
    return result;
}

}  // namespace ks
