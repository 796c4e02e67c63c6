#pragma once

#include "analysis.hpp"
#include "model.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string_view>

namespace snnconv {

enum class FixtureKind { ToyClassifier, MiniFpnDetector, BlobDetector };

FixtureKind parse_fixture_kind(std::string_view name);
std::string_view to_string(FixtureKind kind);

struct FixtureSpec {
    FixtureKind kind = FixtureKind::ToyClassifier;
    std::uint64_t seed = 0;
    /// Images in the generated dataset.
    std::size_t count = 8;
    /// Square image side in pixels; a multiple of 4, at least 16.
    std::size_t image_size = 32;
};

struct Fixture {
    ModelGraph model;
    Tensor calibration;
    Dataset dataset;
    std::optional<AnchorConfig> anchors;
};

/// Deterministic: equal FixtureSpecs give identical fixtures.
Fixture make_fixture(const FixtureSpec& spec);

// Layout: model.json + <name>.bin, calib.tensor, dataset.json with
// images/NNNN.tensor, and anchors.json for detectors.
void write_fixture(const Fixture& fixture, const std::filesystem::path& out_dir);

} // namespace snnconv
