#include "tensor.hpp"

#include "binary_io.hpp"
#include "error.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace snnconv {

namespace {
constexpr char kTensorMagic[4] = {'S', 'N', 'N', 'T'};
constexpr std::uint32_t kTensorVersion = 1;
} // namespace

std::size_t element_count(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t extent : shape) n *= extent;
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, float fill)
    : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
    if (data_.size() != element_count(shape_)) {
        fail(ErrorCode::Shape, "tensor data length " + std::to_string(data_.size()) +
                                   " does not match shape " + shape_string(shape_));
    }
}

Tensor Tensor::reshaped(Shape shape) const {
    return Tensor(std::move(shape), data_);
}

Tensor Tensor::sample(std::size_t index) const {
    if (shape_.empty() || index >= shape_[0]) {
        fail(ErrorCode::Shape, "sample index " + std::to_string(index) + " out of range for " +
                                   shape_string(shape_));
    }
    Shape inner(shape_.begin() + 1, shape_.end());
    const std::size_t n = element_count(inner);
    auto first = data_.begin() + static_cast<std::ptrdiff_t>(index * n);
    return Tensor(std::move(inner), std::vector<float>(first, first + static_cast<std::ptrdiff_t>(n)));
}

Tensor Tensor::samples(std::size_t first, std::size_t count) const {
    if (shape_.empty() || first + count > shape_[0]) {
        fail(ErrorCode::Shape, "sample range out of range for " + shape_string(shape_));
    }
    Shape out_shape = shape_;
    out_shape[0] = count;
    const std::size_t n = shape_[0] == 0 ? 0 : data_.size() / shape_[0];
    auto begin = data_.begin() + static_cast<std::ptrdiff_t>(first * n);
    return Tensor(std::move(out_shape),
                  std::vector<float>(begin, begin + static_cast<std::ptrdiff_t>(count * n)));
}

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

bool Tensor::bitwise_equal(const Tensor& other) const noexcept {
    return shape_ == other.shape_ &&
           (data_.empty() ||
            std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(float)) == 0);
}

double max_abs_difference(const Tensor& actual, const Tensor& reference) {
    if (actual.shape() != reference.shape()) {
        fail(ErrorCode::Shape, "cannot compare " + shape_string(actual.shape()) + " with " +
                                   shape_string(reference.shape()));
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < actual.size(); ++i) {
        worst = std::max(worst, std::abs(static_cast<double>(actual[i]) - reference[i]));
    }
    return worst;
}

double relative_deviation(const Tensor& actual, const Tensor& reference) {
    const double diff = max_abs_difference(actual, reference);
    double scale = 0.0;
    for (float v : reference.values()) scale = std::max(scale, std::abs(static_cast<double>(v)));
    if (diff == 0.0) return 0.0;
    return scale > 0.0 ? diff / scale : std::numeric_limits<double>::infinity();
}

Tensor stack(std::span<const Tensor> items) {
    if (items.empty()) {
        fail(ErrorCode::InvalidArgument, "cannot stack an empty list of tensors");
    }
    Shape shape = items.front().shape();
    std::vector<float> data;
    data.reserve(items.size() * items.front().size());
    for (const Tensor& t : items) {
        if (t.shape() != shape) {
            fail(ErrorCode::Shape, "cannot stack " + shape_string(t.shape()) + " with " +
                                       shape_string(shape));
        }
        data.insert(data.end(), t.values().begin(), t.values().end());
    }
    shape.insert(shape.begin(), items.size());
    return Tensor(std::move(shape), std::move(data));
}

Tensor load_tensor(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        fail(ErrorCode::Io, "cannot open tensor file '" + path.string() + "'");
    }
    char magic[4];
    std::uint32_t version = 0;
    std::uint32_t rank = 0;
    if (!in.read(magic, 4) || std::memcmp(magic, kTensorMagic, 4) != 0) {
        fail(ErrorCode::Format, "'" + path.string() + "' is not a tensor file (bad magic)");
    }
    if (!detail::read_le(in, version) || version != kTensorVersion) {
        fail(ErrorCode::Format, "'" + path.string() + "': unsupported tensor file version");
    }
    if (!detail::read_le(in, rank) || rank > 8) {
        fail(ErrorCode::Format, "'" + path.string() + "': bad tensor rank");
    }
    Shape shape(rank);
    for (auto& extent : shape) {
        std::uint32_t e = 0;
        if (!detail::read_le(in, e)) {
            fail(ErrorCode::Format, "'" + path.string() + "': truncated tensor header");
        }
        extent = e;
    }
    std::vector<float> data(element_count(shape));
    if (!detail::read_floats_le(in, data)) {
        fail(ErrorCode::Format, "'" + path.string() + "': tensor data shorter than shape " +
                                    shape_string(shape));
    }
    if (in.peek() != std::char_traits<char>::eof()) {
        fail(ErrorCode::Format, "'" + path.string() + "': trailing bytes after tensor data");
    }
    Tensor t(std::move(shape), std::move(data));
    if (!t.all_finite()) {
        fail(ErrorCode::Numeric, "'" + path.string() + "': tensor contains non-finite values");
    }
    return t;
}

void save_tensor(const Tensor& tensor, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        fail(ErrorCode::Io, "cannot write tensor file '" + path.string() + "'");
    }
    out.write(kTensorMagic, 4);
    detail::write_le<std::uint32_t>(out, kTensorVersion);
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.rank()));
    for (std::size_t extent : tensor.shape()) {
        detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(extent));
    }
    detail::write_floats_le(out, tensor.values());
    if (!out) {
        fail(ErrorCode::Io, "failed writing tensor file '" + path.string() + "'");
    }
}

} // namespace snnconv
