#include "freeseg/conceptspace.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "freeseg/errors.hpp"
#include "freeseg/hashing.hpp"

namespace freeseg::concepts {

TokenSequence TokenSequence::from_words(const std::vector<std::string>& words) {
    TokenSequence seq;
    for (const auto& w : words) seq.entries.push_back({w, Tensor{}});
    return seq;
}

Tensor random_orthogonal(int rows, int cols, Rng& rng) {
    if (rows > cols) throw ConfigError("random_orthogonal: rows must be <= cols");
    Tensor m = Tensor::randn({rows, cols}, rng);
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < i; ++j) {
            double dot = 0.0;
            for (int k = 0; k < cols; ++k) dot += m(i, k) * m(j, k);
            for (int k = 0; k < cols; ++k) m(i, k) -= dot * m(j, k);
        }
        double nrm = 0.0;
        for (int k = 0; k < cols; ++k) nrm += m(i, k) * m(i, k);
        nrm = std::sqrt(nrm);
        if (nrm < 1e-9) throw NumericFault("random_orthogonal: degenerate row");
        for (int k = 0; k < cols; ++k) m(i, k) /= nrm;
    }
    return m;
}

namespace {

// Attribute pattern a word contributes: color words carry their RGB, family
// words their one-hot, style words their texture scalar plus the stuff flag.
// Task and template words carry no attributes (identity component only).
std::vector<double> word_pattern(const std::string& w, int n_families) {
    std::vector<double> a(static_cast<size_t>(synth::attribute_length(n_families)), 0.0);
    const auto& fams = synth::family_words();
    for (int f = 0; f < n_families && f < static_cast<int>(fams.size()); ++f)
        if (fams[static_cast<size_t>(f)] == w) {
            a[static_cast<size_t>(f)] = 1.0;
            return a;
        }
    for (const auto& c : synth::color_words())
        if (c == w) {
            const auto rgb = synth::color_rgb(c);
            a[static_cast<size_t>(n_families) + 0] = rgb[0];
            a[static_cast<size_t>(n_families) + 1] = rgb[1];
            a[static_cast<size_t>(n_families) + 2] = rgb[2];
            return a;
        }
    for (const auto& s : synth::style_words())
        if (s == w) {
            a[static_cast<size_t>(n_families) + 3] = synth::style_texture(s);
            a[static_cast<size_t>(n_families) + 4] = 1.0;
            return a;
        }
    return a;
}

const std::vector<std::string>& extra_words() {
    // task names + fixed-template filler
    static const std::vector<std::string> v = {"semantic", "instance", "panoptic", "segmentation.",
                                               "a",        "photo",    "of",       "for",
                                               "."};
    return v;
}

} // namespace

ConceptEncoder::ConceptEncoder(const synth::CategorySet& cats, const ConceptEncoderConfig& cfg)
    : cfg_(cfg) {
    attr_len_ = static_cast<int>(cats.classes.at(0).attributes.size());
    const int n_families = attr_len_ - 5;

    std::set<std::string> wordset;
    for (const auto& c : cats.classes)
        for (const auto& w : c.words()) wordset.insert(w);
    for (int f = 0; f < n_families; ++f) wordset.insert(synth::family_words()[static_cast<size_t>(f)]);
    for (const auto& w : synth::color_words()) wordset.insert(w);
    for (const auto& w : synth::style_words()) wordset.insert(w);
    for (const auto& w : extra_words()) wordset.insert(w);
    words_.assign(wordset.begin(), wordset.end());
    for (size_t i = 0; i < words_.size(); ++i) word_index_[words_[i]] = static_cast<int>(i);

    Rng rng(cfg_.seed);
    lift_ = Tensor::randn({cfg_.token_dim, attr_len_}, rng, 1.0 / std::sqrt(attr_len_));
    mix1_ = random_orthogonal(cfg_.token_dim, cfg_.token_dim, rng);
    mix2_ = random_orthogonal(cfg_.out_dim, cfg_.token_dim, rng);
    pos_ = Tensor::randn({cfg_.max_seq_len, cfg_.token_dim}, rng, cfg_.pos_scale);

    word_matrix_ = Tensor({static_cast<int>(words_.size()), cfg_.token_dim});
    for (size_t wi = 0; wi < words_.size(); ++wi) {
        const auto pattern = word_pattern(words_[wi], n_families);
        // deterministic per-word identity component
        uint64_t hseed = hash_bytes(words_[wi], cfg_.seed ^ 0xabcdef1234ull);
        Rng wrng(hseed);
        for (int k = 0; k < cfg_.token_dim; ++k) {
            double v = 0.0;
            for (int a = 0; a < attr_len_; ++a) v += lift_(k, a) * pattern[static_cast<size_t>(a)];
            v += cfg_.word_hash_scale * wrng.normal();
            word_matrix_(static_cast<int>(wi), k) = v;
        }
    }
}

ConceptEncoder::ConceptEncoder(const ConceptEncoderConfig& cfg, int attr_len,
                               std::vector<std::string> words, Tensor word_matrix, Tensor lift,
                               Tensor mix1, Tensor mix2, Tensor pos)
    : cfg_(cfg),
      attr_len_(attr_len),
      words_(std::move(words)),
      word_matrix_(std::move(word_matrix)),
      lift_(std::move(lift)),
      mix1_(std::move(mix1)),
      mix2_(std::move(mix2)),
      pos_(std::move(pos)) {
    for (size_t i = 0; i < words_.size(); ++i) word_index_[words_[i]] = static_cast<int>(i);
}

Tensor ConceptEncoder::word_vector(const std::string& w) const {
    auto it = word_index_.find(w);
    if (it == word_index_.end()) throw ConfigError("vocabulary error: unknown token '" + w + "'");
    Tensor v({cfg_.token_dim});
    for (int k = 0; k < cfg_.token_dim; ++k) v[k] = word_matrix_(it->second, k);
    return v;
}

Tensor ConceptEncoder::encode(const TokenSequence& seq) const {
    const int n = static_cast<int>(seq.entries.size());
    if (n < 1) throw ConfigError("encode: empty token sequence");
    if (n > cfg_.max_seq_len) throw ConfigError("encode: sequence too long");
    Tensor pooled({cfg_.token_dim});
    for (int i = 0; i < n; ++i) {
        const auto& e = seq.entries[static_cast<size_t>(i)];
        Tensor x = e.is_word() ? word_vector(e.word) : e.ctx;
        if (static_cast<int>(x.size()) != cfg_.token_dim)
            throw ConfigError("encode: context vector has wrong dimension");
        for (int k = 0; k < cfg_.token_dim; ++k) x[k] += pos_(i, k);
        // h_i = tanh(mix1 · x_i)
        for (int r = 0; r < cfg_.token_dim; ++r) {
            double acc = 0.0;
            for (int k = 0; k < cfg_.token_dim; ++k) acc += mix1_(r, k) * x[k];
            pooled[r] += std::tanh(acc) / n;
        }
    }
    Tensor z({cfg_.out_dim});
    for (int r = 0; r < cfg_.out_dim; ++r) {
        double acc = 0.0;
        for (int k = 0; k < cfg_.token_dim; ++k) acc += mix2_(r, k) * pooled[k];
        z[r] = acc;
    }
    const double nrm = z.l2_norm();
    if (!(nrm > 1e-30)) throw NumericFault("encode: zero-norm embedding");
    for (int r = 0; r < cfg_.out_dim; ++r) z[r] /= nrm;
    return z;
}

ad::Node* ConceptEncoder::encode(ad::Graph& g, const std::vector<GraphToken>& seq) const {
    const int n = static_cast<int>(seq.size());
    if (n < 1) throw ConfigError("encode: empty token sequence");
    if (n > cfg_.max_seq_len) throw ConfigError("encode: sequence too long");
    std::vector<ad::Node*> rows;
    for (int i = 0; i < n; ++i) {
        const auto& e = seq[static_cast<size_t>(i)];
        ad::Node* x;
        if (e.ctx) {
            if (static_cast<int>(e.ctx->val.size()) != cfg_.token_dim)
                throw ConfigError("encode: context vector has wrong dimension");
            x = e.ctx;
        } else {
            x = g.constant(word_vector(e.word));
        }
        Tensor p({cfg_.token_dim});
        for (int k = 0; k < cfg_.token_dim; ++k) p[k] = pos_(i, k);
        x = g.add(g.reshape(x, {1, cfg_.token_dim}), g.constant(Tensor::from({1, cfg_.token_dim},
                  std::vector<double>(p.data(), p.data() + p.size()))));
        rows.push_back(x);
    }
    ad::Node* X = rows.size() == 1 ? rows[0] : nullptr;
    if (!X) {
        std::vector<ad::Node*> flat;
        for (auto* r : rows) flat.push_back(r);
        X = g.stack_rows(flat);
    }
    ad::Node* H = g.tanh_(g.matmul(X, g.constant(mix1_), false, true)); // (n, d_tok)
    ad::Node* u = g.reshape(g.mean_rows(H), {1, cfg_.token_dim});
    ad::Node* z = g.matmul(u, g.constant(mix2_), false, true); // (1, D)
    return g.l2_normalize_rows(z);
}

Tensor ConceptEncoder::encode_attr_vector(const std::vector<double>& attr) const {
    if (static_cast<int>(attr.size()) != attr_len_)
        throw ConfigError("encode_attr_vector: wrong attribute length");
    // Mimics a two-token name: the lifted attribute pattern is scaled the way
    // two pooled name tokens would be, and the mean of the first two
    // positional vectors is applied.
    Tensor x({cfg_.token_dim});
    for (int k = 0; k < cfg_.token_dim; ++k) {
        double v = 0.0;
        for (int a = 0; a < attr_len_; ++a) v += lift_(k, a) * attr[static_cast<size_t>(a)];
        x[k] = 0.5 * v + 0.5 * (pos_(0, k) + pos_(1, k));
    }
    Tensor pooled({cfg_.token_dim});
    for (int r = 0; r < cfg_.token_dim; ++r) {
        double acc = 0.0;
        for (int k = 0; k < cfg_.token_dim; ++k) acc += mix1_(r, k) * x[k];
        pooled[r] = std::tanh(acc);
    }
    Tensor z({cfg_.out_dim});
    for (int r = 0; r < cfg_.out_dim; ++r) {
        double acc = 0.0;
        for (int k = 0; k < cfg_.token_dim; ++k) acc += mix2_(r, k) * pooled[k];
        z[r] = acc;
    }
    const double nrm = z.l2_norm();
    if (!(nrm > 1e-30)) throw NumericFault("encode_attr_vector: zero-norm embedding");
    for (int r = 0; r < cfg_.out_dim; ++r) z[r] /= nrm;
    return z;
}

uint64_t ConceptEncoder::params_hash() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& w : words_) h = hash_bytes(w, h);
    h = hash_tensor(word_matrix_, h);
    h = hash_tensor(lift_, h);
    h = hash_tensor(mix1_, h);
    h = hash_tensor(mix2_, h);
    h = hash_tensor(pos_, h);
    return h;
}

// ---------------------------------------------------------------------------
// RegionEncoder
// ---------------------------------------------------------------------------

RegionStats RegionEncoder::compute_stats(const ImageF32& image, const MaskU8& mask) const {
    if (image.h != mask.h || image.w != mask.w)
        throw ConfigError("encode_region: image/mask shape mismatch");
    const int64_t area = mask.area();
    if (area == 0) throw DataError("degenerate region: empty mask");
    RegionStats st;
    st.norm_area = static_cast<double>(area) / (static_cast<double>(mask.h) * mask.w);

    double sx = 0, sy = 0;
    for (int y = 0; y < mask.h; ++y)
        for (int x = 0; x < mask.w; ++x) {
            if (!mask.at(y, x)) continue;
            for (int c = 0; c < 3; ++c) st.mean_color[static_cast<size_t>(c)] += image.at(y, x, c);
            sx += x;
            sy += y;
        }
    for (auto& c : st.mean_color) c /= static_cast<double>(area);
    const double cx = sx / static_cast<double>(area), cy = sy / static_cast<double>(area);

    // second moments -> eccentricity
    double m20 = 0, m02 = 0, m11 = 0;
    for (int y = 0; y < mask.h; ++y)
        for (int x = 0; x < mask.w; ++x) {
            if (!mask.at(y, x)) continue;
            const double dx = x - cx, dy = y - cy;
            m20 += dx * dx;
            m02 += dy * dy;
            m11 += dx * dy;
        }
    m20 /= static_cast<double>(area);
    m02 /= static_cast<double>(area);
    m11 /= static_cast<double>(area);
    const double tr = m20 + m02;
    const double det = std::sqrt(std::max(0.0, (m20 - m02) * (m20 - m02) + 4 * m11 * m11));
    const double l1 = 0.5 * (tr + det), l2 = 0.5 * (tr - det);
    st.eccentricity = l1 > 1e-12 ? std::sqrt(std::max(0.0, 1.0 - l2 / l1)) : 0.0;

    // boundary pixels + orientation histogram from the mask gradient
    auto m_at = [&](int y, int x) -> double {
        if (y < 0 || y >= mask.h || x < 0 || x >= mask.w) return 0.0;
        return mask.at(y, x) ? 1.0 : 0.0;
    };
    int64_t boundary = 0;
    double hist_total = 0.0;
    for (int y = 0; y < mask.h; ++y)
        for (int x = 0; x < mask.w; ++x) {
            if (!mask.at(y, x)) continue;
            const bool edge = m_at(y - 1, x) == 0.0 || m_at(y + 1, x) == 0.0 ||
                              m_at(y, x - 1) == 0.0 || m_at(y, x + 1) == 0.0;
            if (!edge) continue;
            ++boundary;
            const double gx = (m_at(y - 1, x + 1) + 2 * m_at(y, x + 1) + m_at(y + 1, x + 1)) -
                              (m_at(y - 1, x - 1) + 2 * m_at(y, x - 1) + m_at(y + 1, x - 1));
            const double gy = (m_at(y + 1, x - 1) + 2 * m_at(y + 1, x) + m_at(y + 1, x + 1)) -
                              (m_at(y - 1, x - 1) + 2 * m_at(y - 1, x) + m_at(y - 1, x + 1));
            const double mag = std::sqrt(gx * gx + gy * gy);
            if (mag < 1e-9) continue;
            double ang = std::atan2(gy, gx);
            if (ang < 0) ang += M_PI; // orientation, mod pi
            if (ang >= M_PI) ang -= M_PI;
            int bin = static_cast<int>(ang / M_PI * 8.0);
            bin = std::min(bin, 7);
            st.orient_hist[static_cast<size_t>(bin)] += mag;
            hist_total += mag;
        }
    if (hist_total > 0)
        for (auto& v : st.orient_hist) v /= hist_total;
    st.compactness =
        boundary > 0
            ? std::min(1.5, 4.0 * M_PI * static_cast<double>(area) /
                                (static_cast<double>(boundary) * static_cast<double>(boundary)))
            : 1.0;

    // masked local contrast (texture): mean absolute intensity step between
    // 4-neighbors that are both inside the mask
    double tex = 0.0;
    int64_t pairs = 0;
    auto intensity = [&](int y, int x) {
        return (image.at(y, x, 0) + image.at(y, x, 1) + image.at(y, x, 2)) / 3.0;
    };
    for (int y = 0; y < mask.h; ++y)
        for (int x = 0; x < mask.w; ++x) {
            if (!mask.at(y, x)) continue;
            if (x + 1 < mask.w && mask.at(y, x + 1)) {
                tex += std::abs(intensity(y, x) - intensity(y, x + 1));
                ++pairs;
            }
            if (y + 1 < mask.h && mask.at(y + 1, x)) {
                tex += std::abs(intensity(y, x) - intensity(y + 1, x));
                ++pairs;
            }
        }
    st.texture_raw = pairs > 0 ? tex / static_cast<double>(pairs) : 0.0;
    return st;
}

std::vector<double> RegionEncoder::family_descriptor(const RegionStats& st) {
    std::vector<double> d;
    d.push_back(st.compactness);
    d.push_back(st.eccentricity);
    auto hist = st.orient_hist;
    std::sort(hist.begin(), hist.end(), std::greater<double>());
    for (double v : hist) d.push_back(v);
    return d;
}

RegionEncoder::RegionEncoder(const ConceptEncoder& enc, const synth::CategorySet& cats)
    : enc_(&enc) {
    n_families_ = enc.attr_len() - 5;
    // canonical family anchors, averaged over a few canonical sizes
    family_anchors_ = Tensor({n_families_, 10});
    synth::CategorySet probe = cats;
    for (int f = 0; f < n_families_; ++f) {
        // find any class of this family to render
        int cid = -1;
        for (int id : cats.thing_ids) {
            const auto& a = cats.classes[static_cast<size_t>(id)].attributes;
            if (a[static_cast<size_t>(f)] > 0.5) {
                cid = id;
                break;
            }
        }
        std::vector<double> acc(10, 0.0);
        int n_sizes = 0;
        for (int size : {32, 48, 64}) {
            if (cid < 0) break;
            MaskU8 mask;
            const ImageF32 img = synth::render_canonical_patch(probe, cid, size, &mask);
            const auto st = compute_stats(img, mask);
            const auto d = family_descriptor(st);
            for (size_t i = 0; i < d.size(); ++i) acc[i] += d[i];
            ++n_sizes;
        }
        for (int i = 0; i < 10; ++i)
            family_anchors_(f, i) = n_sizes ? acc[static_cast<size_t>(i)] / n_sizes : 0.0;
    }

    // texture calibration anchors: a clean thing (attr texture 0) plus each
    // stuff style present in the universe
    std::vector<std::pair<double, double>> anchors; // (raw, attr value)
    {
        MaskU8 mask;
        const int cid = cats.thing_ids.at(0);
        const ImageF32 img = synth::render_canonical_patch(probe, cid, 48, &mask);
        anchors.emplace_back(compute_stats(img, mask).texture_raw, 0.0);
    }
    for (int id : cats.stuff_ids) {
        MaskU8 mask;
        const ImageF32 img = synth::render_canonical_patch(probe, id, 48, &mask);
        const double raw = compute_stats(img, mask).texture_raw;
        const double attr = cats.classes[static_cast<size_t>(id)].attributes[
            static_cast<size_t>(enc.attr_len()) - 2];
        anchors.emplace_back(raw, attr);
    }
    std::sort(anchors.begin(), anchors.end());
    texture_anchors_ = Tensor({static_cast<int>(anchors.size()), 2});
    for (size_t i = 0; i < anchors.size(); ++i) {
        texture_anchors_(static_cast<int>(i), 0) = anchors[i].first;
        texture_anchors_(static_cast<int>(i), 1) = anchors[i].second;
    }
}

RegionEncoder::RegionEncoder(const ConceptEncoder& enc, int n_families, Tensor family_anchors,
                             Tensor texture_anchors)
    : enc_(&enc),
      n_families_(n_families),
      family_anchors_(std::move(family_anchors)),
      texture_anchors_(std::move(texture_anchors)) {}

std::vector<double> RegionEncoder::estimate_attributes(const RegionStats& st) const {
    // texture estimate: monotone piecewise-linear interpolation on anchors
    const int k = texture_anchors_.dim(0);
    double tex = 0.0;
    if (k > 0) {
        const double raw = st.texture_raw;
        if (raw <= texture_anchors_(0, 0)) tex = texture_anchors_(0, 1);
        else if (raw >= texture_anchors_(k - 1, 0)) tex = texture_anchors_(k - 1, 1);
        else {
            for (int i = 0; i + 1 < k; ++i) {
                const double r0 = texture_anchors_(i, 0), r1 = texture_anchors_(i + 1, 0);
                if (raw >= r0 && raw <= r1) {
                    const double f = r1 > r0 ? (raw - r0) / (r1 - r0) : 0.0;
                    tex = texture_anchors_(i, 1) + f * (texture_anchors_(i + 1, 1) - texture_anchors_(i, 1));
                    break;
                }
            }
        }
    }
    const double p_stuff = std::clamp(tex * 2.5, 0.0, 1.0);

    // soft family assignment from the descriptor distance to canonical anchors
    const auto d = family_descriptor(st);
    std::vector<double> logits(static_cast<size_t>(n_families_), 0.0);
    for (int f = 0; f < n_families_; ++f) {
        double dist = 0.0;
        for (int i = 0; i < 10; ++i) {
            const double diff = d[static_cast<size_t>(i)] - family_anchors_(f, i);
            dist += diff * diff;
        }
        logits[static_cast<size_t>(f)] = -dist / kappa_;
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (auto& v : logits) {
        v = std::exp(v - mx);
        z += v;
    }
    for (auto& v : logits) v /= z;

    std::vector<double> attr(static_cast<size_t>(n_families_) + 5, 0.0);
    for (int f = 0; f < n_families_; ++f)
        attr[static_cast<size_t>(f)] = logits[static_cast<size_t>(f)] * (1.0 - p_stuff);
    attr[static_cast<size_t>(n_families_) + 0] = st.mean_color[0];
    attr[static_cast<size_t>(n_families_) + 1] = st.mean_color[1];
    attr[static_cast<size_t>(n_families_) + 2] = st.mean_color[2];
    attr[static_cast<size_t>(n_families_) + 3] = tex;
    attr[static_cast<size_t>(n_families_) + 4] = p_stuff;
    return attr;
}

Tensor RegionEncoder::encode_region(const ImageF32& image, const MaskU8& mask) const {
    const RegionStats st = compute_stats(image, mask);
    return enc_->encode_attr_vector(estimate_attributes(st));
}

uint64_t RegionEncoder::params_hash() const {
    uint64_t h = hash_tensor(family_anchors_);
    h = hash_tensor(texture_anchors_, h);
    return h;
}

} // namespace freeseg::concepts
