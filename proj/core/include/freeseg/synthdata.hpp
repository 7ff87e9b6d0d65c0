#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "freeseg/tensor.hpp"

namespace freeseg::synth {

// One category: a space-separated name whose words carry the semantics, plus
// a numeric descriptor (family one-hot | color rgb | texture | is-stuff).
// The descriptor is what lets unseen names mean something to the frozen
// concept encoder.
struct ClassSpec {
    std::string name;
    std::vector<double> attributes;
    bool is_stuff = false;

    std::vector<std::string> words() const;
};

struct CategorySet {
    std::vector<ClassSpec> classes;
    std::vector<int> seen_ids, unseen_ids, stuff_ids, thing_ids;

    int size() const { return static_cast<int>(classes.size()); }
    bool is_seen(int id) const;
    bool is_unseen(int id) const;
    bool is_stuff_class(int id) const;
    bool is_thing(int id) const;
    void validate() const; // throws DataError on broken invariants
};

struct Segment {
    MaskU8 mask;
    int class_id = 0;
    int segment_id = 0;
    bool operator==(const Segment&) const = default;
};

struct Instance {
    MaskU8 mask;
    int class_id = 0;
    bool operator==(const Instance&) const = default;
};

struct Scene {
    ImageF32 image;
    IntMap sem_gt; // class ids, kBackgroundIndex where void
    std::vector<Instance> ins_gt;
    std::vector<Segment> pan_gt;
    uint64_t seed = 0;
    std::string profile;

    bool operator==(const Scene&) const = default;
};

struct GeneratorProfile {
    std::string name = "profileA";
    int height = 64, width = 64;
    int min_objects = 2, max_objects = 5;
    double min_size = 7.0, max_size = 14.0; // shape radius in pixels
    std::vector<std::array<double, 3>> background_palette;
    double occlusion_prob = 0.3;
    std::string stuff_style = "blobs"; // none | blobs | bands
    int min_stuff_regions = 1, max_stuff_regions = 2;
    double noise_sigma = 0.02;
    double color_jitter = 0.06;

    void validate() const;
    static GeneratorProfile profile_a();
    static GeneratorProfile profile_b();
    static GeneratorProfile by_name(const std::string& name);
};

// Fixed word universes. The concept encoder grounds every word here, so any
// vocabulary built from them resolves at inference regardless of the split.
const std::vector<std::string>& family_words();
const std::vector<std::string>& color_words();
const std::vector<std::string>& style_words();
std::array<double, 3> color_rgb(const std::string& color_word);
double style_texture(const std::string& style_word);
int attribute_length(int n_shape_families);

CategorySet build_vocabulary(int n_shape_families, int n_colors, int n_unseen, int n_stuff,
                             uint64_t rng_seed);

Scene generate_scene(const CategorySet& cats, const GeneratorProfile& profile, uint64_t seed,
                     bool allow_unseen = false);

// Merges panoptic segments into the semantic map and filters thing instances.
std::pair<IntMap, std::vector<Instance>> derive_task_labels(const std::vector<Segment>& pan_gt,
                                                            const CategorySet& cats, int h, int w);

void write_dataset(const std::vector<Scene>& scenes, const CategorySet& cats,
                   const std::string& dir);
std::pair<std::vector<Scene>, CategorySet> read_dataset(const std::string& dir);

// Clean class exemplar (centered, unrotated, jitter- and noise-free) used by
// the region-encoder calibration and the grounding test suites.
ImageF32 render_canonical_patch(const CategorySet& cats, int class_id, int patch_size,
                                MaskU8* out_mask);

} // namespace freeseg::synth
