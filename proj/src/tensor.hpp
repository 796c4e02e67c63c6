#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace snnconv {

/// Extents of a tensor, outermost first. Images and feature maps are (H, W, C).
using Shape = std::vector<std::size_t>;

std::size_t element_count(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major float32 array.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, float fill = 0.0f);
    Tensor(Shape shape, std::vector<float> values);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    /// Extent of the innermost axis; 0 for rank-0 tensors.
    std::size_t channels() const noexcept { return shape_.empty() ? 0 : shape_.back(); }

    std::span<float> values() noexcept { return data_; }
    std::span<const float> values() const noexcept { return data_; }
    float* data() noexcept { return data_.data(); }
    const float* data() const noexcept { return data_.data(); }

    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }

    /// Same values under a new shape with the same element count.
    Tensor reshaped(Shape shape) const;

    /// Sample `index` along axis 0, with that axis dropped.
    Tensor sample(std::size_t index) const;

    /// Samples [first, first + count) along axis 0, axis kept.
    Tensor samples(std::size_t first, std::size_t count) const;

    bool all_finite() const noexcept;

    /// Shape equality plus byte-for-byte equality of the data.
    bool bitwise_equal(const Tensor& other) const noexcept;

private:
    Shape shape_;
    std::vector<float> data_;
};

/// max |actual - reference| over all elements; shapes must match.
double max_abs_difference(const Tensor& actual, const Tensor& reference);

/// max |actual - reference| / max |reference|: deviation relative to the
/// reference's dynamic range. Zero when both are all-zero.
double relative_deviation(const Tensor& actual, const Tensor& reference);

/// Stacks equally-shaped tensors along a new leading axis.
Tensor stack(std::span<const Tensor> items);

// Tensor files: "SNNT" magic, u32 version, u32 rank, u32 extents[rank],
// then float32 values, all little-endian.
Tensor load_tensor(const std::filesystem::path& path);
void save_tensor(const Tensor& tensor, const std::filesystem::path& path);

} // namespace snnconv
