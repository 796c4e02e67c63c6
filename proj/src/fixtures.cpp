#include "fixtures.hpp"

#include "error.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

namespace snnconv {

namespace {

// mt19937_64 is specified bit-exactly by the standard; the distributions are
// not, so they are written out here.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double normal() {
        const double u1 = 1.0 - uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    std::size_t below(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

private:
    std::mt19937_64 gen_;
};

LayerNode input_node(const Shape& shape) {
    LayerNode n;
    n.id = "input";
    n.kind = LayerKind::Input;
    n.output_shape = shape;
    return n;
}

LayerNode conv(std::string id, std::string input, std::size_t k, std::size_t in_ch, std::size_t filters,
               std::size_t stride, Activation act) {
    LayerNode n;
    n.id = std::move(id);
    n.kind = LayerKind::Conv2D;
    n.activation = act;
    n.inputs = {std::move(input)};
    n.attrs.kernel_h = n.attrs.kernel_w = k;
    n.attrs.filters = filters;
    n.attrs.stride = stride;
    n.attrs.padding = Padding::Same;
    n.weights = Tensor({k, k, in_ch, filters});
    n.bias = Tensor({filters});
    return n;
}

// He-style normal weights and small normal biases.
void randomize(LayerNode& n, Rng& rng, double bias_scale) {
    const Shape& s = n.weights->shape();
    const double fan_in = static_cast<double>(s[0] * s[1] * s[2]);
    const double std_w = std::sqrt(2.0 / fan_in);
    for (float& w : n.weights->values()) w = static_cast<float>(rng.normal() * std_w);
    for (float& b : n.bias->values()) b = static_cast<float>(rng.normal() * bias_scale);
}

Tensor uniform_images(Rng& rng, std::size_t n, std::size_t side, std::size_t channels) {
    Tensor t({n, side, side, channels});
    for (float& v : t.values()) v = static_cast<float>(rng.uniform());
    return t;
}

std::string image_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "images/%04zu.tensor", i);
    return buf;
}

void unlabelled_dataset(Fixture& f, Rng& rng, const FixtureSpec& spec, std::size_t channels, std::size_t classes) {
    f.dataset.num_classes = classes;
    for (std::size_t i = 0; i < spec.count; ++i) {
        f.dataset.files.emplace_back(image_name(i));
        f.dataset.images.push_back(uniform_images(rng, 1, spec.image_size, channels).sample(0));
        f.dataset.annotations.emplace_back();
    }
}

Fixture toy_classifier(const FixtureSpec& spec) {
    Rng rng(spec.seed);
    const std::size_t side = spec.image_size;
    Fixture f;
    ModelGraph& g = f.model;
    g.name = "toy-classifier";
    g.input_shape = {side, side, 3};
    g.nodes.push_back(input_node(g.input_shape));
    g.nodes.push_back(conv("conv1", "input", 3, 3, 8, 1, Activation::Relu));
    g.nodes.push_back(conv("conv2", "conv1", 3, 8, 16, 2, Activation::Relu));
    g.nodes.push_back(conv("conv3", "conv2", 3, 16, 16, 1, Activation::Relu));
    g.nodes.push_back(conv("conv4", "conv3", 1, 16, 10, 1, Activation::Relu));
    for (std::size_t i = 1; i < g.nodes.size(); ++i) randomize(g.nodes[i], rng, 0.05);
    g.outputs = {"conv4"};
    g = infer_shapes(g, g.input_shape);
    f.calibration = uniform_images(rng, 64, side, 3);
    unlabelled_dataset(f, rng, spec, 3, 10);
    return f;
}

Fixture mini_fpn(const FixtureSpec& spec) {
    Rng rng(spec.seed);
    const std::size_t side = spec.image_size;
    Fixture f;
    ModelGraph& g = f.model;
    g.name = "mini-fpn-detector";
    g.input_shape = {side, side, 3};
    g.nodes.push_back(input_node(g.input_shape));
    g.nodes.push_back(conv("c1", "input", 3, 3, 8, 1, Activation::Relu));
    g.nodes.push_back(conv("c2", "c1", 3, 8, 16, 2, Activation::Relu));
    g.nodes.push_back(conv("lateral", "c1", 1, 8, 8, 1, Activation::None));
    g.nodes.push_back(conv("top", "c2", 1, 16, 8, 1, Activation::None));
    LayerNode up;
    up.id = "up";
    up.kind = LayerKind::UpsampleNearest;
    up.inputs = {"top"};
    up.attrs.factor = 2;
    g.nodes.push_back(up);
    LayerNode add;
    add.id = "merge";
    add.kind = LayerKind::Add;
    add.inputs = {"lateral", "up"};
    g.nodes.push_back(add);
    // 1x1 heads: 'merge' has a negative low percentile, and a wider kernel
    // would see its zero padding as a nonzero normalized value.
    g.nodes.push_back(conv("cls", "merge", 1, 8, 4, 1, Activation::None));
    g.nodes.push_back(conv("box", "merge", 1, 8, 8, 1, Activation::None));
    for (auto& n : g.nodes) {
        if (n.weights) randomize(n, rng, 0.1);
    }
    g.outputs = {"cls", "box"};
    g = infer_shapes(g, g.input_shape);
    f.calibration = uniform_images(rng, 32, side, 3);
    unlabelled_dataset(f, rng, spec, 3, 2);

    AnchorConfig a;
    a.num_classes = 2;
    a.heads.push_back({"cls", "box", 1.0, {{4.0, 4.0}, {8.0, 8.0}}});
    f.anchors = a;
    return f;
}

// Blob detector. Blobs are 6x6 squares of value 1.0 (class 0) or 0.5
// (class 1) over noise in [0, 0.1).
//
// conv1 (1x1): relu(x - 0.2), relu(x - 0.45), relu(x - 0.7). Then
//   any = (r1 - r2) / 0.25, bright = r3 / 0.3, dim = any - bright
// are exact 0/1 masks.
// conv2 (16x16, stride 4, same): the window of output o spans input
// [4o - 6, 4o + 10), centred on the anchor at 4o + 2. With tap offsets
// u = k - 7.5 it sums, per class, the mask mass M and the second moment
// L2 = sum mask * (ux^2 + uy^2), plus signed first moments of `any` split
// into positive and negative relu channels.
// A blob fully inside a window with centre offset d has M = 36 and
// L2 = 210 + 36 |d|^2, so logit = s (a M - L2 - b) is positive iff
// |d|^2 < 5.5 and equals -s b without a blob. Blob placement keeps d in
// {-1, 0, 1} per axis for the nearest anchor, so every other anchor has
// |d|^2 >= 9. Box deltas are first moment / (36 * 6).
constexpr double kBlobSide = 6.0;
constexpr double kLogitScale = 0.05;
constexpr double kBias = 144.0;
constexpr double kMassWeight = (210.0 + 36.0 * 5.5 + kBias) / 36.0;

Fixture blob_detector(const FixtureSpec& spec) {
    const std::size_t side = spec.image_size;
    Fixture f;
    ModelGraph& g = f.model;
    g.name = "blob-detector";
    g.input_shape = {side, side, 1};
    g.nodes.push_back(input_node(g.input_shape));

    LayerNode c1 = conv("masks", "input", 1, 1, 3, 1, Activation::Relu);
    const std::array<float, 3> thresholds{0.2f, 0.45f, 0.7f};
    for (std::size_t c = 0; c < 3; ++c) {
        (*c1.weights)[c] = 1.0f;
        (*c1.bias)[c] = -thresholds[c];
    }
    g.nodes.push_back(c1);

    // Coefficients on (r1, r2, r3) for each mask.
    const std::array<double, 3> any{4.0, -4.0, 0.0};
    const std::array<double, 3> bright{0.0, 0.0, 1.0 / 0.3};
    const std::array<double, 3> dim{4.0, -4.0, -1.0 / 0.3};
    enum { MassBright, MassDim, L2Bright, L2Dim, XPos, XNeg, YPos, YNeg, Moments };
    LayerNode c2 = conv("moments", "masks", 16, 3, Moments, 4, Activation::Relu);
    for (std::size_t ky = 0; ky < 16; ++ky) {
        for (std::size_t kx = 0; kx < 16; ++kx) {
            const double uy = static_cast<double>(ky) - 7.5, ux = static_cast<double>(kx) - 7.5;
            const double r2 = ux * ux + uy * uy;
            for (std::size_t ci = 0; ci < 3; ++ci) {
                float* w = c2.weights->data() + ((ky * 16 + kx) * 3 + ci) * Moments;
                w[MassBright] = static_cast<float>(bright[ci]);
                w[MassDim] = static_cast<float>(dim[ci]);
                w[L2Bright] = static_cast<float>(r2 * bright[ci]);
                w[L2Dim] = static_cast<float>(r2 * dim[ci]);
                w[XPos] = static_cast<float>(ux * any[ci]);
                w[XNeg] = static_cast<float>(-ux * any[ci]);
                w[YPos] = static_cast<float>(uy * any[ci]);
                w[YNeg] = static_cast<float>(-uy * any[ci]);
            }
        }
    }
    g.nodes.push_back(c2);

    LayerNode cls = conv("cls", "moments", 1, Moments, 2, 1, Activation::None);
    for (std::size_t c = 0; c < 2; ++c) {
        float* w = cls.weights->data();
        w[(c == 0 ? MassBright : MassDim) * 2 + c] = static_cast<float>(kLogitScale * kMassWeight);
        w[(c == 0 ? L2Bright : L2Dim) * 2 + c] = static_cast<float>(-kLogitScale);
        (*cls.bias)[c] = static_cast<float>(-kLogitScale * kBias);
    }
    g.nodes.push_back(cls);

    LayerNode box = conv("box", "moments", 1, Moments, 4, 1, Activation::None);
    const float moment_scale = static_cast<float>(1.0 / (36.0 * kBlobSide));
    float* w = box.weights->data();
    w[XPos * 4 + 0] = moment_scale;
    w[XNeg * 4 + 0] = -moment_scale;
    w[YPos * 4 + 1] = moment_scale;
    w[YNeg * 4 + 1] = -moment_scale;
    g.nodes.push_back(box);

    g.outputs = {"cls", "box"};
    g = infer_shapes(g, g.input_shape);

    AnchorConfig a;
    a.num_classes = 2;
    a.heads.push_back({"cls", "box", 4.0, {{kBlobSide, kBlobSide}}});
    f.anchors = a;

    // Top-left corners with (corner mod 4) in {0, 2, 3} put the blob centre
    // within one pixel of an anchor.
    std::vector<std::size_t> corners;
    for (std::size_t p = 0; p + 6 <= side; ++p) {
        if (p % 4 != 1) corners.push_back(p);
    }
    Rng rng(spec.seed);
    auto make_image = [&](std::vector<GroundTruth>& boxes) {
        Tensor img({side, side, 1});
        for (float& v : img.values()) v = static_cast<float>(0.1 * rng.uniform());
        const std::size_t want = 1 + rng.below(3);
        std::vector<std::pair<std::size_t, std::size_t>> placed;
        for (std::size_t attempt = 0; attempt < 200 && placed.size() < want; ++attempt) {
            const std::size_t x = corners[rng.below(corners.size())];
            const std::size_t y = corners[rng.below(corners.size())];
            bool clear = true;
            for (auto [px, py] : placed) {
                const std::size_t dx = x > px ? x - px : px - x, dy = y > py ? y - py : py - y;
                if (std::max(dx, dy) < 16) clear = false;
            }
            if (!clear) continue;
            placed.emplace_back(x, y);
            const std::size_t cls_id = rng.below(2);
            const float value = cls_id == 0 ? 1.0f : 0.5f;
            for (std::size_t yy = y; yy < y + 6; ++yy) {
                for (std::size_t xx = x; xx < x + 6; ++xx) img[yy * side + xx] = value;
            }
            boxes.push_back({{double(x), double(y), double(x + 6), double(y + 6)}, cls_id});
        }
        return img;
    };

    std::vector<Tensor> calib;
    for (std::size_t i = 0; i < 64; ++i) {
        std::vector<GroundTruth> unused;
        calib.push_back(make_image(unused));
    }
    f.calibration = stack(calib);
    f.dataset.num_classes = 2;
    for (std::size_t i = 0; i < spec.count; ++i) {
        std::vector<GroundTruth> boxes;
        f.dataset.images.push_back(make_image(boxes));
        f.dataset.files.emplace_back(image_name(i));
        f.dataset.annotations.push_back(std::move(boxes));
    }
    return f;
}

} // namespace

FixtureKind parse_fixture_kind(std::string_view name) {
    if (name == "toy-classifier") return FixtureKind::ToyClassifier;
    if (name == "mini-fpn-detector") return FixtureKind::MiniFpnDetector;
    if (name == "blob-detector") return FixtureKind::BlobDetector;
    fail(ErrorCode::InvalidArgument, "unknown fixture kind '" + std::string(name) +
                                         "' (expected toy-classifier, mini-fpn-detector or blob-detector)");
}

std::string_view to_string(FixtureKind kind) {
    switch (kind) {
    case FixtureKind::ToyClassifier: return "toy-classifier";
    case FixtureKind::MiniFpnDetector: return "mini-fpn-detector";
    case FixtureKind::BlobDetector: return "blob-detector";
    }
    return "?";
}

Fixture make_fixture(const FixtureSpec& spec) {
    if (spec.image_size < 16 || spec.image_size % 4 != 0) {
        fail(ErrorCode::InvalidArgument, "fixture image size must be a multiple of 4 and at least 16");
    }
    switch (spec.kind) {
    case FixtureKind::ToyClassifier: return toy_classifier(spec);
    case FixtureKind::MiniFpnDetector: return mini_fpn(spec);
    case FixtureKind::BlobDetector: return blob_detector(spec);
    }
    fail(ErrorCode::Internal, "unhandled fixture kind");
}

void write_fixture(const Fixture& fixture, const std::filesystem::path& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "images", ec);
    if (ec) fail(ErrorCode::Io, "cannot create '" + out_dir.string() + "': " + ec.message());
    save_model(fixture.model, out_dir / "model.json");
    save_tensor(fixture.calibration, out_dir / "calib.tensor");
    save_dataset(fixture.dataset, out_dir / "dataset.json");
    if (fixture.anchors) save_anchor_config(*fixture.anchors, out_dir / "anchors.json");
}

} // namespace snnconv
