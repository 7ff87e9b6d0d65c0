#pragma once

#include <array>
#include <string>
#include <vector>

#include "freeseg/tensor.hpp"

namespace freeseg::report {

// Deterministic class palette: bijective with class ids (golden-ratio hue
// walk); the background index renders near-black.
std::array<uint8_t, 3> class_color(int class_id);

void write_png_rgb(const std::string& path, int h, int w, const std::vector<uint8_t>& rgb);

// Renders a class-index map with the class palette.
void write_label_map_png(const std::string& path, const IntMap& labels);

// Renders an image (f32 [0,1]) as PNG.
void write_image_png(const std::string& path, const ImageF32& image);

struct Bar {
    std::string label;
    double value = 0.0;
    double err = 0.0; // stddev whisker, 0 = none
};

void write_bar_chart_svg(const std::string& path, const std::string& title,
                         const std::vector<Bar>& bars, double y_max = 0.0);

} // namespace freeseg::report
