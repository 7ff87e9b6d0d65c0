#include "freeseg/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "freeseg/errors.hpp"
#include "freeseg/fseg_io.hpp"
#include "freeseg/rng.hpp"

namespace freeseg::synth {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<std::string> ClassSpec::words() const {
    std::vector<std::string> out;
    std::istringstream in(name);
    std::string w;
    while (in >> w) out.push_back(w);
    return out;
}

bool CategorySet::is_seen(int id) const {
    return std::find(seen_ids.begin(), seen_ids.end(), id) != seen_ids.end();
}
bool CategorySet::is_unseen(int id) const {
    return std::find(unseen_ids.begin(), unseen_ids.end(), id) != unseen_ids.end();
}
bool CategorySet::is_stuff_class(int id) const {
    return std::find(stuff_ids.begin(), stuff_ids.end(), id) != stuff_ids.end();
}
bool CategorySet::is_thing(int id) const {
    return std::find(thing_ids.begin(), thing_ids.end(), id) != thing_ids.end();
}

void CategorySet::validate() const {
    const int n = size();
    auto check_partition = [n](const std::vector<int>& a, const std::vector<int>& b,
                               const char* what) {
        std::vector<bool> hit(static_cast<size_t>(n), false);
        for (int id : a) {
            if (id < 0 || id >= n || hit[static_cast<size_t>(id)])
                throw DataError(std::string("category set: bad ") + what + " partition");
            hit[static_cast<size_t>(id)] = true;
        }
        for (int id : b) {
            if (id < 0 || id >= n || hit[static_cast<size_t>(id)])
                throw DataError(std::string("category set: bad ") + what + " partition");
            hit[static_cast<size_t>(id)] = true;
        }
        for (bool h : hit)
            if (!h) throw DataError(std::string("category set: incomplete ") + what + " partition");
    };
    check_partition(seen_ids, unseen_ids, "seen/unseen");
    check_partition(stuff_ids, thing_ids, "stuff/thing");
    std::set<std::string> names;
    std::set<std::vector<double>> attrs;
    for (const auto& c : classes) {
        if (!names.insert(c.name).second) throw DataError("category set: duplicate name " + c.name);
        if (!attrs.insert(c.attributes).second)
            throw DataError("category set: duplicate attribute vector for " + c.name);
        if (c.attributes.size() != classes[0].attributes.size())
            throw DataError("category set: ragged attribute vectors");
    }
}

void GeneratorProfile::validate() const {
    if (height < 32 || width < 32) throw ConfigError("profile: image size must be >= 32");
    if (min_objects < 0 || max_objects < min_objects)
        throw ConfigError("profile: bad object-count range");
    if (min_size <= 1.0 || max_size < min_size) throw ConfigError("profile: bad size range");
    if (background_palette.empty()) throw ConfigError("profile: empty background palette");
    if (stuff_style != "none" && stuff_style != "blobs" && stuff_style != "bands")
        throw ConfigError("profile: unknown stuff style " + stuff_style);
    if (min_stuff_regions < 0 || max_stuff_regions < min_stuff_regions)
        throw ConfigError("profile: bad stuff-region range");
}

GeneratorProfile GeneratorProfile::profile_a() {
    GeneratorProfile p;
    p.name = "profileA";
    p.height = 64;
    p.width = 64;
    p.min_objects = 2;
    p.max_objects = 5;
    p.min_size = 7.0;
    p.max_size = 14.0;
    p.background_palette = {{0.12, 0.12, 0.14}, {0.16, 0.15, 0.13}, {0.10, 0.14, 0.12}};
    p.occlusion_prob = 0.3;
    p.stuff_style = "blobs";
    p.min_stuff_regions = 1;
    p.max_stuff_regions = 2;
    return p;
}

GeneratorProfile GeneratorProfile::profile_b() {
    GeneratorProfile p;
    p.name = "profileB";
    p.height = 64;
    p.width = 64;
    p.min_objects = 3;
    p.max_objects = 6;
    p.min_size = 6.0;
    p.max_size = 11.0;
    p.background_palette = {{0.55, 0.58, 0.62}, {0.50, 0.54, 0.60}, {0.60, 0.56, 0.52}};
    p.occlusion_prob = 0.55;
    p.stuff_style = "bands";
    p.min_stuff_regions = 1;
    p.max_stuff_regions = 2;
    return p;
}

GeneratorProfile GeneratorProfile::by_name(const std::string& name) {
    if (name == "profileA") return profile_a();
    if (name == "profileB") return profile_b();
    throw ConfigError("unknown generator profile: " + name);
}

const std::vector<std::string>& family_words() {
    static const std::vector<std::string> v = {"triangle", "circle", "square",
                                               "star",     "cross",  "bar"};
    return v;
}

const std::vector<std::string>& color_words() {
    static const std::vector<std::string> v = {"red",     "green", "blue",   "yellow",
                                               "magenta", "cyan",  "orange", "teal"};
    return v;
}

const std::vector<std::string>& style_words() {
    static const std::vector<std::string> v = {"striped", "checker", "dotted", "speckled"};
    return v;
}

std::array<double, 3> color_rgb(const std::string& color_word) {
    static const std::vector<std::array<double, 3>> rgb = {
        {0.85, 0.15, 0.15}, {0.15, 0.75, 0.20}, {0.20, 0.30, 0.85}, {0.90, 0.85, 0.15},
        {0.85, 0.20, 0.80}, {0.15, 0.80, 0.80}, {0.90, 0.55, 0.10}, {0.10, 0.50, 0.50}};
    const auto& words = color_words();
    for (size_t i = 0; i < words.size(); ++i)
        if (words[i] == color_word) return rgb[i];
    throw ConfigError("unknown color word: " + color_word);
}

double style_texture(const std::string& style_word) {
    static const std::vector<double> tex = {0.4, 0.6, 0.8, 1.0};
    const auto& words = style_words();
    for (size_t i = 0; i < words.size(); ++i)
        if (words[i] == style_word) return tex[i];
    throw ConfigError("unknown style word: " + style_word);
}

int attribute_length(int n_shape_families) { return n_shape_families + 5; }

namespace {

std::vector<double> thing_attributes(int family, int n_families, const std::string& color) {
    std::vector<double> a(static_cast<size_t>(attribute_length(n_families)), 0.0);
    a[static_cast<size_t>(family)] = 1.0;
    const auto rgb = color_rgb(color);
    a[static_cast<size_t>(n_families) + 0] = rgb[0];
    a[static_cast<size_t>(n_families) + 1] = rgb[1];
    a[static_cast<size_t>(n_families) + 2] = rgb[2];
    // texture = 0, stuff flag = 0
    return a;
}

std::vector<double> stuff_attributes(int n_families, const std::string& color,
                                     const std::string& style) {
    std::vector<double> a(static_cast<size_t>(attribute_length(n_families)), 0.0);
    const auto rgb = color_rgb(color);
    a[static_cast<size_t>(n_families) + 0] = rgb[0];
    a[static_cast<size_t>(n_families) + 1] = rgb[1];
    a[static_cast<size_t>(n_families) + 2] = rgb[2];
    a[static_cast<size_t>(n_families) + 3] = style_texture(style);
    a[static_cast<size_t>(n_families) + 4] = 1.0;
    return a;
}

} // namespace

CategorySet build_vocabulary(int n_shape_families, int n_colors, int n_unseen, int n_stuff,
                             uint64_t rng_seed) {
    if (n_shape_families < 1 || n_shape_families > static_cast<int>(family_words().size()))
        throw ConfigError("n_shape_families out of range [1, " +
                          std::to_string(family_words().size()) + "]");
    if (n_colors < 1 || n_colors > static_cast<int>(color_words().size()))
        throw ConfigError("n_colors out of range [1, " + std::to_string(color_words().size()) + "]");
    if (n_unseen < 1) throw ConfigError("n_unseen must be >= 1");
    const int n_things = n_shape_families * n_colors;
    const int total = n_things + n_stuff;
    if (total < n_unseen + 2)
        throw ConfigError("infeasible split request: " + std::to_string(total) + " classes cannot host " +
                          std::to_string(n_unseen) + " unseen plus a seen thing and stuff");
    if (n_stuff < 1)
        throw ConfigError("infeasible split request: at least one stuff class is required");
    if (n_stuff > static_cast<int>(style_words().size()) * n_colors)
        throw ConfigError("n_stuff exceeds available (color, style) combinations");
    if (n_unseen >= n_things)
        throw ConfigError("infeasible split request: no seen thing class would remain");

    CategorySet cats;
    for (int f = 0; f < n_shape_families; ++f)
        for (int c = 0; c < n_colors; ++c) {
            ClassSpec spec;
            spec.name = color_words()[static_cast<size_t>(c)] + " " +
                        family_words()[static_cast<size_t>(f)];
            spec.attributes = thing_attributes(f, n_shape_families, color_words()[static_cast<size_t>(c)]);
            spec.is_stuff = false;
            cats.classes.push_back(std::move(spec));
            cats.thing_ids.push_back(f * n_colors + c);
        }

    Rng rng(rng_seed);
    std::vector<std::pair<int, int>> stuff_combos; // (style, color)
    for (int s = 0; s < static_cast<int>(style_words().size()); ++s)
        for (int c = 0; c < n_colors; ++c) stuff_combos.emplace_back(s, c);
    rng.shuffle(stuff_combos);
    for (int i = 0; i < n_stuff; ++i) {
        const auto [s, c] = stuff_combos[static_cast<size_t>(i)];
        ClassSpec spec;
        spec.name = color_words()[static_cast<size_t>(c)] + " " + style_words()[static_cast<size_t>(s)];
        spec.attributes = stuff_attributes(n_shape_families, color_words()[static_cast<size_t>(c)],
                                           style_words()[static_cast<size_t>(s)]);
        spec.is_stuff = true;
        cats.classes.push_back(std::move(spec));
        cats.stuff_ids.push_back(n_things + i);
    }

    // Unseen things are picked along a shuffled partial diagonal so every
    // family and color also appears in some seen class; that is what gives
    // unseen names transferable structure.
    std::vector<int> fam_order(static_cast<size_t>(n_shape_families));
    std::vector<int> col_order(static_cast<size_t>(n_colors));
    for (int i = 0; i < n_shape_families; ++i) fam_order[static_cast<size_t>(i)] = i;
    for (int i = 0; i < n_colors; ++i) col_order[static_cast<size_t>(i)] = i;
    rng.shuffle(fam_order);
    rng.shuffle(col_order);
    std::set<int> unseen;
    int guard = 0;
    while (static_cast<int>(unseen.size()) < n_unseen && guard < n_things * 4) {
        const int i = guard++;
        const int f = fam_order[static_cast<size_t>(i % n_shape_families)];
        const int c = col_order[static_cast<size_t>((i + i / n_colors) % n_colors)];
        unseen.insert(f * n_colors + c);
    }
    for (int id = 0; static_cast<int>(unseen.size()) < n_unseen; ++id) unseen.insert(id);

    for (int id = 0; id < total; ++id) {
        if (unseen.count(id)) cats.unseen_ids.push_back(id);
        else cats.seen_ids.push_back(id);
    }
    cats.validate();
    return cats;
}

// ---------------------------------------------------------------------------
// rendering
// ---------------------------------------------------------------------------

namespace {

int family_of(const CategorySet& cats, int class_id) {
    const auto& a = cats.classes[static_cast<size_t>(class_id)].attributes;
    const int n_fam = static_cast<int>(a.size()) - 5;
    for (int f = 0; f < n_fam; ++f)
        if (a[static_cast<size_t>(f)] > 0.5) return f;
    return -1; // stuff
}

std::array<double, 3> class_rgb(const CategorySet& cats, int class_id) {
    const auto& a = cats.classes[static_cast<size_t>(class_id)].attributes;
    const int n_fam = static_cast<int>(a.size()) - 5;
    return {a[static_cast<size_t>(n_fam)], a[static_cast<size_t>(n_fam) + 1],
            a[static_cast<size_t>(n_fam) + 2]};
}

double class_texture(const CategorySet& cats, int class_id) {
    const auto& a = cats.classes[static_cast<size_t>(class_id)].attributes;
    return a[a.size() - 2];
}

int style_of(const CategorySet& cats, int class_id) {
    const double t = class_texture(cats, class_id);
    for (int s = 0; s < static_cast<int>(style_words().size()); ++s)
        if (std::abs(style_texture(style_words()[static_cast<size_t>(s)]) - t) < 1e-9) return s;
    return -1;
}

bool inside_shape(int family, double x, double y) {
    // coordinates pre-scaled to the unit shape, pre-rotated
    switch (family) {
        case 0: { // triangle (equilateral, apex up)
            const double r = 1.0;
            const std::array<std::array<double, 2>, 3> v = {
                {{0.0, -r}, {r * 0.8660254, r * 0.5}, {-r * 0.8660254, r * 0.5}}};
            for (int i = 0; i < 3; ++i) {
                const auto& p = v[static_cast<size_t>(i)];
                const auto& q = v[static_cast<size_t>((i + 1) % 3)];
                const double cross = (q[0] - p[0]) * (y - p[1]) - (q[1] - p[1]) * (x - p[0]);
                if (cross < 0) return false;
            }
            return true;
        }
        case 1: // circle
            return x * x + y * y <= 1.0;
        case 2: // square
            return std::max(std::abs(x), std::abs(y)) <= 0.82;
        case 3: { // five-point star
            const double rho = std::sqrt(x * x + y * y);
            if (rho > 1.0) return false;
            double phi = std::atan2(y, x);
            const double period = 2.0 * M_PI / 5.0;
            double m = std::fmod(phi + 10.0 * M_PI, period);
            const double d = std::abs(m - period / 2.0) / (period / 2.0); // 1 at spike
            const double bound = 0.42 + (1.0 - 0.42) * d;
            return rho <= bound;
        }
        case 4: // cross
            return (std::abs(x) <= 0.34 && std::abs(y) <= 1.0) ||
                   (std::abs(y) <= 0.34 && std::abs(x) <= 1.0);
        case 5: // bar
            return std::abs(x) <= 1.0 && std::abs(y) <= 0.36;
        default:
            throw ConfigError("unknown shape family id " + std::to_string(family));
    }
}

MaskU8 rasterize_shape(int family, int h, int w, double cx, double cy, double size, double theta) {
    MaskU8 m{h, w, std::vector<uint8_t>(static_cast<size_t>(h) * w, 0)};
    const double c = std::cos(-theta), s = std::sin(-theta);
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - size - 1)));
    const int y1 = std::min(h - 1, static_cast<int>(std::ceil(cy + size + 1)));
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - size - 1)));
    const int x1 = std::min(w - 1, static_cast<int>(std::ceil(cx + size + 1)));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            const double dx = (x + 0.5 - cx) / size;
            const double dy = (y + 0.5 - cy) / size;
            const double rx = c * dx - s * dy;
            const double ry = s * dx + c * dy;
            if (inside_shape(family, rx, ry)) m.at(y, x) = 1;
        }
    return m;
}

// Stuff pattern brightness factor at a pixel. Texture amplitude `t` controls
// the contrast; each style has a distinct spatial structure.
double pattern_factor(int style, double t, int x, int y, uint64_t cell_seed) {
    switch (style) {
        case 0: { // striped
            const double s = std::sin(2.0 * M_PI * (x + 2.0 * y) / 9.0);
            return 1.0 + 0.38 * t * s;
        }
        case 1: { // checker
            const bool on = ((x / 4) + (y / 4)) % 2 == 0;
            return on ? 1.0 + 0.34 * t : 1.0 - 0.34 * t;
        }
        case 2: { // dotted
            const int px = x % 6 - 3, py = y % 6 - 3;
            return (px * px + py * py <= 3) ? 1.0 - 0.45 * t : 1.0 + 0.16 * t;
        }
        case 3: { // speckled
            uint64_t v = cell_seed ^ (static_cast<uint64_t>(x) * 0x9e3779b97f4a7c15ull) ^
                         (static_cast<uint64_t>(y) * 0xc2b2ae3d27d4eb4full);
            const double u = static_cast<double>(Rng::splitmix64(v) >> 11) * 0x1.0p-53;
            return 1.0 + 0.42 * t * (2.0 * u - 1.0);
        }
        default:
            return 1.0;
    }
}

struct DrawState {
    int h, w;
    std::vector<double> rgb;  // working canvas, H*W*3
    std::vector<int> owner;   // segment index per pixel, -1 = void
};

void paint_stuff(DrawState& ds, const MaskU8& region, const CategorySet& cats, int class_id,
                 int seg_index, uint64_t cell_seed) {
    const auto base = class_rgb(cats, class_id);
    const double t = class_texture(cats, class_id);
    const int style = style_of(cats, class_id);
    for (int y = 0; y < ds.h; ++y)
        for (int x = 0; x < ds.w; ++x) {
            if (!region.at(y, x)) continue;
            const double f = pattern_factor(style, t, x, y, cell_seed);
            const size_t o = (static_cast<size_t>(y) * ds.w + x) * 3;
            for (int c = 0; c < 3; ++c)
                ds.rgb[o + static_cast<size_t>(c)] = std::clamp(base[static_cast<size_t>(c)] * f, 0.0, 1.0);
            ds.owner[static_cast<size_t>(y) * ds.w + x] = seg_index;
        }
}

void paint_thing(DrawState& ds, const MaskU8& mask, const std::array<double, 3>& rgb,
                 int seg_index) {
    for (int y = 0; y < ds.h; ++y)
        for (int x = 0; x < ds.w; ++x) {
            if (!mask.at(y, x)) continue;
            const size_t o = (static_cast<size_t>(y) * ds.w + x) * 3;
            for (int c = 0; c < 3; ++c) ds.rgb[o + static_cast<size_t>(c)] = rgb[static_cast<size_t>(c)];
            ds.owner[static_cast<size_t>(y) * ds.w + x] = seg_index;
        }
}

MaskU8 stuff_region_mask(const GeneratorProfile& profile, Rng& rng, int region_index) {
    const int h = profile.height, w = profile.width;
    MaskU8 m{h, w, std::vector<uint8_t>(static_cast<size_t>(h) * w, 0)};
    if (profile.stuff_style == "bands") {
        const int band_h = static_cast<int>(rng.uniform(0.18, 0.32) * h);
        const int y0 = static_cast<int>(rng.uniform_int(0, h - band_h));
        for (int y = y0; y < y0 + band_h; ++y)
            for (int x = 0; x < w; ++x) m.at(y, x) = 1;
    } else { // blobs
        const int n_discs = static_cast<int>(rng.uniform_int(2, 4));
        const double cx0 = rng.uniform(0.15 * w, 0.85 * w);
        const double cy0 = rng.uniform(0.15 * h, 0.85 * h);
        for (int d = 0; d < n_discs; ++d) {
            const double r = rng.uniform(0.14, 0.26) * std::min(h, w);
            const double cx = std::clamp(cx0 + rng.uniform(-0.18, 0.18) * w, 0.0, w - 1.0);
            const double cy = std::clamp(cy0 + rng.uniform(-0.18, 0.18) * h, 0.0, h - 1.0);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
                    if (dx * dx + dy * dy <= r * r) m.at(y, x) = 1;
                }
        }
    }
    (void)region_index;
    return m;
}

} // namespace

std::pair<IntMap, std::vector<Instance>> derive_task_labels(const std::vector<Segment>& pan_gt,
                                                            const CategorySet& cats, int h, int w) {
    IntMap sem = IntMap::filled(h, w, kBackgroundIndex);
    std::vector<uint8_t> covered(static_cast<size_t>(h) * w, 0);
    for (const auto& seg : pan_gt) {
        if (seg.mask.h != h || seg.mask.w != w) throw DataError("derive_task_labels: mask shape mismatch");
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                if (!seg.mask.at(y, x)) continue;
                auto& c = covered[static_cast<size_t>(y) * w + x];
                if (c) throw DataError("derive_task_labels: overlapping panoptic segments");
                c = 1;
                sem.at(y, x) = seg.class_id;
            }
    }
    std::vector<Instance> ins;
    for (const auto& seg : pan_gt) {
        if (cats.is_thing(seg.class_id)) ins.push_back(Instance{seg.mask, seg.class_id});
    }
    return {std::move(sem), std::move(ins)};
}

Scene generate_scene(const CategorySet& cats, const GeneratorProfile& profile, uint64_t seed,
                     bool allow_unseen) {
    profile.validate();
    cats.validate();
    Rng rng(seed ^ 0x5eedf00dull);
    const int h = profile.height, w = profile.width;

    std::vector<int> stuff_pool, thing_pool;
    for (int id : cats.stuff_ids)
        if (allow_unseen || cats.is_seen(id)) stuff_pool.push_back(id);
    for (int id : cats.thing_ids)
        if (allow_unseen || cats.is_seen(id)) thing_pool.push_back(id);
    if (stuff_pool.empty() || thing_pool.empty())
        throw ConfigError("generate_scene: empty class pool for this split");

    DrawState ds{h, w, std::vector<double>(static_cast<size_t>(h) * w * 3, 0.0),
                 std::vector<int>(static_cast<size_t>(h) * w, -1)};
    const auto bg =
        profile.background_palette[static_cast<size_t>(rng.uniform_int(
            0, static_cast<int>(profile.background_palette.size()) - 1))];
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const size_t o = (static_cast<size_t>(y) * w + x) * 3;
            for (int c = 0; c < 3; ++c) ds.rgb[o + static_cast<size_t>(c)] = bg[static_cast<size_t>(c)];
        }

    std::vector<int> draw_classes; // per segment index
    int seg_count = 0;

    if (profile.stuff_style != "none") {
        const int n_regions =
            static_cast<int>(rng.uniform_int(profile.min_stuff_regions, profile.max_stuff_regions));
        for (int i = 0; i < n_regions; ++i) {
            const int cid =
                stuff_pool[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(stuff_pool.size()) - 1))];
            const MaskU8 region = stuff_region_mask(profile, rng, i);
            paint_stuff(ds, region, cats, cid, seg_count, seed * 1315423911u + static_cast<uint64_t>(i));
            draw_classes.push_back(cid);
            ++seg_count;
        }
    }

    const int n_obj = static_cast<int>(rng.uniform_int(profile.min_objects, profile.max_objects));
    for (int i = 0; i < n_obj; ++i) {
        const int cid =
            thing_pool[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(thing_pool.size()) - 1))];
        const int family = family_of(cats, cid);
        const double size = rng.uniform(profile.min_size, profile.max_size);
        const double theta = rng.uniform(0.0, 2.0 * M_PI);
        const bool may_overlap = rng.uniform() < profile.occlusion_prob;
        MaskU8 mask;
        for (int attempt = 0; attempt < 40; ++attempt) {
            const double cx = rng.uniform(size * 0.7, w - size * 0.7);
            const double cy = rng.uniform(size * 0.7, h - size * 0.7);
            mask = rasterize_shape(family, h, w, cx, cy, size, theta);
            if (may_overlap) break;
            int64_t overlap = 0;
            for (size_t p = 0; p < mask.px.size(); ++p)
                if (mask.px[p] && ds.owner[p] >= 0 &&
                    !cats.is_stuff_class(draw_classes[static_cast<size_t>(ds.owner[p])]))
                    ++overlap;
            if (overlap * 20 <= mask.area()) break; // < 5% overlap with other things
        }
        auto rgb = class_rgb(cats, cid);
        for (auto& c : rgb)
            c = std::clamp(c + rng.uniform(-profile.color_jitter, profile.color_jitter), 0.0, 1.0);
        paint_thing(ds, mask, rgb, seg_count);
        draw_classes.push_back(cid);
        ++seg_count;
    }

    // sensor noise
    for (auto& v : ds.rgb) v = std::clamp(v + rng.normal(0.0, profile.noise_sigma), 0.0, 1.0);

    // extract surviving segments from the owner map (full occlusion drops one)
    Scene scene;
    scene.seed = seed;
    scene.profile = profile.name;
    scene.image.h = h;
    scene.image.w = w;
    scene.image.px.resize(static_cast<size_t>(h) * w * 3);
    for (size_t i = 0; i < ds.rgb.size(); ++i) scene.image.px[i] = static_cast<float>(ds.rgb[i]);

    int next_id = 1;
    for (int s = 0; s < seg_count; ++s) {
        MaskU8 m{h, w, std::vector<uint8_t>(static_cast<size_t>(h) * w, 0)};
        int64_t area = 0;
        for (size_t p = 0; p < ds.owner.size(); ++p)
            if (ds.owner[p] == s) {
                m.px[p] = 1;
                ++area;
            }
        if (area == 0) continue;
        scene.pan_gt.push_back(Segment{std::move(m), draw_classes[static_cast<size_t>(s)], next_id++});
    }

    auto [sem, ins] = derive_task_labels(scene.pan_gt, cats, h, w);
    scene.sem_gt = std::move(sem);
    scene.ins_gt = std::move(ins);
    return scene;
}

ImageF32 render_canonical_patch(const CategorySet& cats, int class_id, int patch_size,
                                MaskU8* out_mask) {
    const int n = patch_size;
    ImageF32 img;
    img.h = n;
    img.w = n;
    img.px.assign(static_cast<size_t>(n) * n * 3, 0.13f);
    MaskU8 mask{n, n, std::vector<uint8_t>(static_cast<size_t>(n) * n, 0)};
    if (cats.is_stuff_class(class_id)) {
        const auto base = class_rgb(cats, class_id);
        const double t = class_texture(cats, class_id);
        const int style = style_of(cats, class_id);
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                const double f = pattern_factor(style, t, x, y, 0x7ea7c0ffeeull);
                const size_t o = (static_cast<size_t>(y) * n + x) * 3;
                for (int c = 0; c < 3; ++c)
                    img.px[o + static_cast<size_t>(c)] =
                        static_cast<float>(std::clamp(base[static_cast<size_t>(c)] * f, 0.0, 1.0));
                mask.at(y, x) = 1;
            }
    } else {
        const int family = family_of(cats, class_id);
        const auto rgb = class_rgb(cats, class_id);
        mask = rasterize_shape(family, n, n, n / 2.0, n / 2.0, n * 0.34, 0.0);
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                if (!mask.at(y, x)) continue;
                const size_t o = (static_cast<size_t>(y) * n + x) * 3;
                for (int c = 0; c < 3; ++c)
                    img.px[o + static_cast<size_t>(c)] = static_cast<float>(rgb[static_cast<size_t>(c)]);
            }
    }
    if (out_mask) *out_mask = std::move(mask);
    return img;
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

namespace {

json cats_to_json(const CategorySet& cats) {
    json jc = json::array();
    for (const auto& c : cats.classes)
        jc.push_back({{"name", c.name}, {"attributes", c.attributes}, {"is_stuff", c.is_stuff}});
    return json{{"classes", jc},
                {"seen_ids", cats.seen_ids},
                {"unseen_ids", cats.unseen_ids},
                {"stuff_ids", cats.stuff_ids},
                {"thing_ids", cats.thing_ids}};
}

CategorySet cats_from_json(const json& j) {
    CategorySet cats;
    for (const auto& jc : j.at("classes")) {
        ClassSpec c;
        c.name = jc.at("name").get<std::string>();
        c.attributes = jc.at("attributes").get<std::vector<double>>();
        c.is_stuff = jc.at("is_stuff").get<bool>();
        cats.classes.push_back(std::move(c));
    }
    cats.seen_ids = j.at("seen_ids").get<std::vector<int>>();
    cats.unseen_ids = j.at("unseen_ids").get<std::vector<int>>();
    cats.stuff_ids = j.at("stuff_ids").get<std::vector<int>>();
    cats.thing_ids = j.at("thing_ids").get<std::vector<int>>();
    cats.validate();
    return cats;
}

} // namespace

void write_dataset(const std::vector<Scene>& scenes, const CategorySet& cats,
                   const std::string& dir) {
    fs::create_directories(dir);
    json jscenes = json::array();
    for (size_t i = 0; i < scenes.size(); ++i) {
        const auto& sc = scenes[i];
        char fname[32];
        std::snprintf(fname, sizeof(fname), "scene_%05zu.fseg", i);
        const fs::path p = fs::path(dir) / fname;
        std::ofstream os(p, std::ios::binary);
        if (!os) throw DataError("cannot open for write: " + p.string());
        fsegio::write_record(os, fsegio::from_image(sc.image));
        fsegio::write_record(os, fsegio::from_i32(sc.sem_gt.v,
                                                  {static_cast<uint32_t>(sc.sem_gt.h),
                                                   static_cast<uint32_t>(sc.sem_gt.w)}));
        std::vector<int32_t> cls, ids;
        std::vector<MaskU8> masks;
        for (const auto& seg : sc.pan_gt) {
            cls.push_back(seg.class_id);
            ids.push_back(seg.segment_id);
            masks.push_back(seg.mask);
        }
        fsegio::write_record(os, fsegio::from_i32(cls, {static_cast<uint32_t>(cls.size())}));
        fsegio::write_record(os, fsegio::from_i32(ids, {static_cast<uint32_t>(ids.size())}));
        fsegio::write_record(os, fsegio::from_masks(masks));
        jscenes.push_back({{"file", fname},
                           {"seed", sc.seed},
                           {"profile", sc.profile},
                           {"segments", sc.pan_gt.size()}});
    }
    const json manifest = {
        {"format_version", 1}, {"vocabulary", cats_to_json(cats)}, {"scenes", jscenes}};
    const fs::path tmp = fs::path(dir) / "manifest.json.tmp";
    {
        std::ofstream os(tmp);
        if (!os) throw DataError("cannot open for write: " + tmp.string());
        os << manifest.dump(2) << "\n";
    }
    fs::rename(tmp, fs::path(dir) / "manifest.json");
}

std::pair<std::vector<Scene>, CategorySet> read_dataset(const std::string& dir) {
    const fs::path mpath = fs::path(dir) / "manifest.json";
    std::ifstream in(mpath);
    if (!in) throw DataError("missing manifest: " + mpath.string());
    json manifest;
    try {
        in >> manifest;
    } catch (const json::exception& e) {
        throw DataError(std::string("corrupt manifest: ") + e.what());
    }
    if (manifest.at("format_version").get<int>() != 1)
        throw DataError("unknown format version in manifest");
    CategorySet cats = cats_from_json(manifest.at("vocabulary"));

    std::vector<Scene> scenes;
    for (const auto& js : manifest.at("scenes")) {
        const fs::path p = fs::path(dir) / js.at("file").get<std::string>();
        std::ifstream is(p, std::ios::binary);
        if (!is) throw DataError("missing scene file: " + p.string());
        Scene sc;
        sc.seed = js.at("seed").get<uint64_t>();
        sc.profile = js.at("profile").get<std::string>();
        sc.image = fsegio::to_image(fsegio::read_record(is));
        const auto sem_rec = fsegio::read_record(is);
        if (sem_rec.dims.size() != 2 || static_cast<int>(sem_rec.dims[0]) != sc.image.h ||
            static_cast<int>(sem_rec.dims[1]) != sc.image.w)
            throw DataError("shape mismatch: semantic map vs image in " + p.string());
        sc.sem_gt = IntMap{sc.image.h, sc.image.w, fsegio::to_i32(sem_rec)};
        const auto cls = fsegio::to_i32(fsegio::read_record(is));
        const auto ids = fsegio::to_i32(fsegio::read_record(is));
        auto masks = fsegio::to_masks(fsegio::read_record(is));
        if (cls.size() != ids.size() || cls.size() != masks.size())
            throw DataError("shape mismatch: segment table in " + p.string());
        for (size_t i = 0; i < cls.size(); ++i) {
            if (cls[i] < 0 || cls[i] >= cats.size())
                throw DataError("vocabulary mismatch: scene references class id " +
                                std::to_string(cls[i]));
            if (masks[i].h != sc.image.h || masks[i].w != sc.image.w)
                throw DataError("shape mismatch: segment mask in " + p.string());
            sc.pan_gt.push_back(Segment{std::move(masks[i]), cls[i], ids[i]});
        }
        auto [sem, ins] = derive_task_labels(sc.pan_gt, cats, sc.image.h, sc.image.w);
        if (!(sem == sc.sem_gt))
            throw DataError("corrupt container: semantic map disagrees with segments in " +
                            p.string());
        sc.ins_gt = std::move(ins);
        scenes.push_back(std::move(sc));
    }
    return {std::move(scenes), std::move(cats)};
}

} // namespace freeseg::synth
