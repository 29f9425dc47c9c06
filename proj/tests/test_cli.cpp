#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#ifndef SWAPLAB_BIN
#error "SWAPLAB_BIN must point at the CLI binary"
#endif

namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args) {
    const std::string cmd =
        std::string(SWAPLAB_BIN) + " " + args + " >/dev/null 2>&1";
    int rc = std::system(cmd.c_str());
    REQUIRE(rc != -1);
    return WEXITSTATUS(rc);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::trunc);
    out << text;
}

struct Workdir {
    fs::path root;
    Workdir() : root(fs::temp_directory_path() / "swaplab_cli_test") {
        fs::remove_all(root);
        fs::create_directories(root);
    }
    ~Workdir() { fs::remove_all(root); }
    std::string str(const std::string& rel) const { return (root / rel).string(); }
};

// small enough that pretrain finishes in a couple of seconds
std::string tiny_config(const std::string& out_dir, const std::string& extra = "") {
    return "{\n"
           "  \"model\": {\"num_blocks\": 1, \"embed_dim\": 8, \"num_heads\": 2,\n"
           "            \"ffn_hidden\": 12, \"seq_len\": 4, \"input_dim\": 3,\n"
           "            \"num_classes\": 6},\n"
           "  \"data\": {\"pretrain_classes\": 4, \"learn_class_count\": 2,\n"
           "           \"per_class_train\": 6, \"per_class_test\": 4, \"noise_std\": 0.2},\n"
           "  \"pretrain\": {\"epochs\": 1, \"batch_size\": 6, \"gate_acc\": 0},\n"
           "  \"phases\": {\"learn\": {\"epochs\": 1, \"batch_size\": 6},\n"
           "             \"forget\": {\"epochs\": 1, \"batch_size\": 6}},\n"
           "  \"lora\": {\"rank\": 2},\n"
           "  \"output_dir\": \"" + out_dir + "\"" +
           (extra.empty() ? "" : ",\n" + extra) + "\n}\n";
}

std::vector<std::string> csv_lines(const fs::path& p) {
    std::ifstream in(p);
    REQUIRE(in.good());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) lines.push_back(line);
    return lines;
}

}  // namespace

TEST_CASE("gen-data is deterministic and writes the four split files") {
    Workdir wd;
    write_file(wd.str("cfg.json"), tiny_config(wd.str("out")));
    REQUIRE(run_cli("gen-data --config " + wd.str("cfg.json")) == 0);
    for (const char* stem :
         {"pretrain_train", "pretrain_test", "new_train", "new_test"}) {
        CHECK(fs::exists(wd.str("out/" + std::string(stem) + ".csv")));
        CHECK(fs::exists(wd.str("out/" + std::string(stem) + ".json")));
    }
    // 4 classes × 6 per class; 2 × 6 for the fresh classes
    CHECK(csv_lines(wd.str("out/pretrain_train.csv")).size() == 24);
    CHECK(csv_lines(wd.str("out/new_train.csv")).size() == 12);

    std::string first = slurp(wd.str("out/pretrain_train.csv"));
    REQUIRE(run_cli("gen-data --config " + wd.str("cfg.json")) == 0);
    CHECK(slurp(wd.str("out/pretrain_train.csv")) == first);
}

TEST_CASE("pretrain writes m0 and a Start metrics row; gate failures exit 3") {
    Workdir wd;
    write_file(wd.str("cfg.json"), tiny_config(wd.str("out")));
    REQUIRE(run_cli("pretrain --config " + wd.str("cfg.json")) == 0);
    CHECK(fs::exists(wd.str("out/m0.ckpt")));
    auto lines = csv_lines(wd.str("out/metrics_start.csv"));
    REQUIRE(lines.size() == 2);
    CHECK(lines[0] == "stage,acc_r,acc_l,acc_f,loss_retain,loss_learn,loss_forget,loss_re");
    CHECK(lines[1].rfind("Start,", 0) == 0);

    // an unreachable accuracy gate on a one-epoch model
    std::string strict = tiny_config(wd.str("out2"));
    std::size_t pos = strict.find("\"gate_acc\": 0");
    REQUIRE(pos != std::string::npos);
    strict.replace(pos, std::string("\"gate_acc\": 0").size(), "\"gate_acc\": 101");
    write_file(wd.str("strict.json"), strict);
    CHECK(run_cli("pretrain --config " + wd.str("strict.json")) == 3);
}

TEST_CASE("run produces the stage table and diagnostics; bad plans exit 2") {
    Workdir wd;
    write_file(wd.str("cfg.json"), tiny_config(wd.str("out")));

    // no m0 yet: missing input
    CHECK(run_cli("run --config " + wd.str("cfg.json")) == 4);

    REQUIRE(run_cli("pretrain --config " + wd.str("cfg.json")) == 0);
    REQUIRE(run_cli("run --config " + wd.str("cfg.json")) == 0);
    auto lines = csv_lines(wd.str("out/metrics.csv"));
    REQUIRE(lines.size() == 4);  // header, Start, L, L->F
    CHECK(lines[1].rfind("Start,", 0) == 0);
    CHECK(lines[2].rfind("L,", 0) == 0);
    CHECK(lines[3].rfind("L->F,", 0) == 0);
    CHECK(fs::exists(wd.str("out/diagnostics/delta_Start_to_L.csv")));
    CHECK(fs::exists(wd.str("out/diagnostics/depth_com.csv")));
    CHECK(fs::exists(wd.str("out/run/stage_L.ckpt")));

    std::string bad = tiny_config(wd.str("out"), "  \"plan\": \"L->Q\"");
    write_file(wd.str("bad.json"), bad);
    CHECK(run_cli("run --config " + wd.str("bad.json")) == 2);

    write_file(wd.str("broken.json"), "{ this is not json");
    CHECK(run_cli("run --config " + wd.str("broken.json")) == 2);
}

TEST_CASE("eval reproduces the pretrain Start metrics") {
    Workdir wd;
    write_file(wd.str("cfg.json"), tiny_config(wd.str("out")));
    REQUIRE(run_cli("pretrain --config " + wd.str("cfg.json")) == 0);
    REQUIRE(run_cli("eval --config " + wd.str("cfg.json") + " --checkpoint " +
                    wd.str("out/m0.ckpt")) == 0);
    auto eval_lines = csv_lines(wd.str("out/eval.csv"));
    REQUIRE(eval_lines.size() == 2);
    auto start_lines = csv_lines(wd.str("out/metrics_start.csv"));
    // metrics_start: stage,acc_r,acc_l,acc_f,...; eval: acc_r,acc_l,acc_f
    std::string start_accs = start_lines[1].substr(std::string("Start,").size());
    CHECK(start_accs.rfind(eval_lines[1], 0) == 0);

    CHECK(run_cli("eval --config " + wd.str("cfg.json") + " --checkpoint " +
                  wd.str("out/nowhere.ckpt")) == 4);
}

TEST_CASE("diagnose: self-comparison is all zeros, mismatched shapes exit 5") {
    Workdir wd;
    write_file(wd.str("cfg.json"), tiny_config(wd.str("out")));
    REQUIRE(run_cli("pretrain --config " + wd.str("cfg.json")) == 0);
    REQUIRE(run_cli("diagnose " + wd.str("out/m0.ckpt") + " " + wd.str("out/m0.ckpt") +
                    " --out " + wd.str("diag")) == 0);
    auto lines = csv_lines(wd.str("diag/delta.csv"));
    REQUIRE(lines.size() > 2);
    for (std::size_t i = 2; i < lines.size(); ++i) {
        std::size_t last = lines[i].rfind(',');
        CHECK(std::stod(lines[i].substr(last + 1)) == 0.0);
    }

    std::string other = tiny_config(wd.str("out_big"));
    std::size_t pos = other.find("\"embed_dim\": 8");
    other.replace(pos, std::string("\"embed_dim\": 8").size(), "\"embed_dim\": 16");
    write_file(wd.str("big.json"), other);
    REQUIRE(run_cli("pretrain --config " + wd.str("big.json")) == 0);
    CHECK(run_cli("diagnose " + wd.str("out/m0.ckpt") + " " + wd.str("out_big/m0.ckpt")) ==
          5);
}

TEST_CASE("seed overrides change the data stream") {
    Workdir wd;
    write_file(wd.str("cfg.json"), tiny_config(wd.str("out")));
    REQUIRE(run_cli("gen-data --config " + wd.str("cfg.json")) == 0);
    std::string base = slurp(wd.str("out/pretrain_train.csv"));
    REQUIRE(run_cli("gen-data --config " + wd.str("cfg.json") +
                    " --seed-override data=99 --out " + wd.str("out_alt")) == 0);
    CHECK(slurp(wd.str("out_alt/pretrain_train.csv")) != base);
    CHECK(run_cli("gen-data --config " + wd.str("cfg.json") +
                  " --seed-override nonsense") == 2);
}
