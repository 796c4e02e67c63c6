#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / ("snnconv-cli-" + std::to_string(std::random_device{}()));

struct Result {
    int code;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

Result run(const std::string& args) {
    fs::create_directories(kWork);
    const fs::path out = kWork / "stdout.txt", err = kWork / "stderr.txt";
    const std::string cmd = std::string("\"") + SNNCONV_CLI + "\" " + args + " >\"" + out.string() + "\" 2>\"" +
                            err.string() + "\"";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

std::string w(const std::string& leaf) {
    return "\"" + (kWork / leaf).string() + "\"";
}

struct Cleanup {
    ~Cleanup() {
        std::error_code ec;
        fs::remove_all(kWork, ec);
    }
} cleanup;

// Generated once and shared by the cases below.
void ensure_fixtures() {
    static bool done = false;
    if (done) return;
    REQUIRE(run("gen-fixtures --kind toy-classifier --seed 1 --count 2 --out-dir " + w("toy")).code == 0);
    REQUIRE(run("gen-fixtures --kind blob-detector --seed 3 --count 4 --out-dir " + w("blob")).code == 0);
    REQUIRE(run("convert --model " + w("toy/model.json") + " --calib " + w("toy/calib.tensor") + " --out " +
                w("toy-norm/model.json"))
                .code == 0);
    REQUIRE(run("convert --model " + w("blob/model.json") + " --calib " + w("blob/calib.tensor") + " --out " +
                w("blob-norm/model.json"))
                .code == 0);
    done = true;
}

double max_rate_column(const std::string& csv) {
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    double hi = -1;
    while (std::getline(in, line)) {
        const auto pos = line.rfind(',');
        hi = std::max(hi, std::stod(line.substr(pos + 1)));
    }
    return hi;
}

} // namespace

TEST_CASE("usage errors exit with 2") {
    CHECK(run("").code == 2);
    CHECK(run("frobnicate").code == 2);
    CHECK(run("convert --model x.json").code == 2);
    CHECK(run("gen-fixtures --kind resnet --out-dir " + w("bad")).code == 2);
}

TEST_CASE("convert") {
    ensure_fixtures();
    Result r = run("convert --model " + w("toy/model.json") + " --calib " + w("toy/calib.tensor") + " --out " +
                   w("c/model.json") + " --stats-out " + w("c/stats.json"));
    REQUIRE(r.code == 0);
    CHECK(r.out.rfind("layer,in_range_fraction,max_relative_deviation\n", 0) == 0);
    CHECK(fs::exists(kWork / "c/toy-classifier-normalized.bin"));
    CHECK(slurp(kWork / "c/stats.json").find("\"lambda\"") != std::string::npos);

    Result missing = run("convert --model " + w("toy/model.json") + " --calib " + w("nope.tensor") + " --out " +
                         w("c2/model.json"));
    CHECK(missing.code == 2);
    CHECK(!missing.err.empty());

    Result degenerate = run("convert --model " + w("toy/model.json") + " --calib " + w("toy/calib.tensor") +
                            " --p-lo 50 --p-hi 50 --out " + w("c3/model.json"));
    CHECK(degenerate.code == 0);
    CHECK(degenerate.err.find("warning") != std::string::npos);
}

TEST_CASE("simulate") {
    ensure_fixtures();
    const std::string base = "simulate --model " + w("blob-norm/model.json") + " --image " +
                             w("blob/images/0000.tensor") + " --duration 2000 --record moments,cls,box";
    Result a = run(base + " --rates-out " + w("s/a.csv") + " --raster-out " + w("s/ra"));
    REQUIRE(a.code == 0);
    Result b = run(base + " --rates-out " + w("s/b.csv") + " --raster-out " + w("s/rb"));
    REQUIRE(b.code == 0);
    const std::string csv = slurp(kWork / "s/a.csv");
    CHECK(csv == slurp(kWork / "s/b.csv"));
    CHECK(max_rate_column(csv) <= 1.0);
    CHECK(csv.find(",-") == std::string::npos);
    for (const auto& e : fs::directory_iterator(kWork / "s/ra")) {
        CHECK(slurp(e.path()) == slurp(kWork / "s/rb" / e.path().filename()));
    }

    CHECK(run("simulate --model " + w("blob-norm/model.json") + " --image " + w("blob/images/0000.tensor") +
              " --transient 2000 --duration 1000")
              .code == 2);
    CHECK(run("simulate --model " + w("blob/model.json") + " --image " + w("blob/images/0000.tensor")).code == 2);
}

TEST_CASE("correlate") {
    ensure_fixtures();
    const std::string base = "correlate --model " + w("toy/model.json") + " --normalized " + w("toy-norm/model.json") +
                             " --image " + w("toy/images/0000.tensor");
    Result r = run(base + " --at 100,400 --scatter-dir " + w("corr"));
    REQUIRE(r.code == 0);
    CHECK(r.out.rfind("time_ms,layer,pearson,count\n", 0) == 0);
    CHECK(fs::exists(kWork / "corr/correlation_400ms.csv"));

    Result self = run(base + " --at 200 --layers conv1,conv4 --self-check");
    REQUIRE(self.code == 0);
    CHECK(self.out.find("200,conv1,1,") != std::string::npos);
    CHECK(self.out.find("200,conv4,1,") != std::string::npos);

    CHECK(run(base + " --at 0").code == 2);
}

TEST_CASE("evaluate") {
    ensure_fixtures();
    Result r = run("evaluate --model " + w("blob/model.json") + " --normalized " + w("blob-norm/model.json") +
                   " --dataset " + w("blob/dataset.json") + " --anchors " + w("blob/anchors.json") +
                   " --duration 300 --sample-every 50");
    REQUIRE(r.code == 0);
    int rows = 0;
    std::istringstream in(r.out);
    for (std::string line; std::getline(in, line);) rows += line.find(",all,") != std::string::npos;
    CHECK(rows == 300 / 50 + 1);  // plus the analog reference row

    std::ofstream(kWork / "empty.json") << R"({"num_classes": 2, "images": []})";
    CHECK(run("evaluate --model " + w("blob/model.json") + " --normalized " + w("blob-norm/model.json") +
              " --dataset " + w("empty.json") + " --anchors " + w("blob/anchors.json"))
              .code == 2);
}

TEST_CASE("gen-fixtures is deterministic") {
    REQUIRE(run("gen-fixtures --kind mini-fpn-detector --seed 9 --count 2 --out-dir " + w("g1")).code == 0);
    REQUIRE(run("gen-fixtures --kind mini-fpn-detector --seed 9 --count 2 --out-dir " + w("g2")).code == 0);
    int files = 0;
    for (const auto& e : fs::recursive_directory_iterator(kWork / "g1")) {
        if (!e.is_regular_file()) continue;
        ++files;
        CHECK(slurp(e.path()) == slurp(kWork / "g2" / fs::relative(e.path(), kWork / "g1")));
    }
    CHECK(files >= 5);
    CHECK(slurp(kWork / "g1/model.json").find("\"Add\"") != std::string::npos);
}
