#include "freeseg/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "freeseg/errors.hpp"
#include "freeseg/fseg_io.hpp"
#include "freeseg/hashing.hpp"

namespace freeseg::ckpt {

using nlohmann::json;

namespace {

constexpr char kCkptMagic[8] = {'F', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};

void put_u32(std::ostream& os, uint32_t v) {
    uint8_t b[4] = {static_cast<uint8_t>(v), static_cast<uint8_t>(v >> 8),
                    static_cast<uint8_t>(v >> 16), static_cast<uint8_t>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is) {
    uint8_t b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw DataError("corrupt checkpoint: truncated");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void write_section(std::ostream& os, const std::string& name, const Tensor& t) {
    put_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    fsegio::write_record(os, fsegio::from_tensor(t));
}

json cats_to_json(const synth::CategorySet& cats) {
    json jc = json::array();
    for (const auto& c : cats.classes)
        jc.push_back({{"name", c.name}, {"attributes", c.attributes}, {"is_stuff", c.is_stuff}});
    return json{{"classes", jc},
                {"seen_ids", cats.seen_ids},
                {"unseen_ids", cats.unseen_ids},
                {"stuff_ids", cats.stuff_ids},
                {"thing_ids", cats.thing_ids}};
}

synth::CategorySet cats_from_json(const json& j) {
    synth::CategorySet cats;
    for (const auto& jc : j.at("classes")) {
        synth::ClassSpec c;
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

void save_checkpoint(const std::string& path, const train::Model& model, const TrainerState& ts) {
    auto& store = const_cast<ParamStore&>(model.store);
    json sections = json::array();
    for (const auto* p : store.all()) {
        json s = {{"name", "param:" + p->name}, {"frozen", p->frozen}};
        sections.push_back(s);
        if (p->m.same_shape(p->value)) {
            sections.push_back({{"name", "adam_m:" + p->name}, {"frozen", false}});
            sections.push_back({{"name", "adam_v:" + p->name}, {"frozen", false}});
        }
    }
    for (const char* n : {"enc:word_matrix", "enc:lift", "enc:mix1", "enc:mix2", "enc:pos",
                          "reg:family_anchors", "reg:texture_anchors"})
        sections.push_back({{"name", n}, {"frozen", true}});

    const auto& ec = model.encoder->config();
    json meta = {
        {"format_version", 1},
        {"iteration", ts.iteration},
        {"adam_t", ts.adam_t},
        {"rng_state",
         {std::to_string(ts.rng_state[0]), std::to_string(ts.rng_state[1]),
          std::to_string(ts.rng_state[2]), std::to_string(ts.rng_state[3])}},
        {"category_set", cats_to_json(model.cats)},
        {"encoder",
         {{"token_dim", ec.token_dim},
          {"out_dim", ec.out_dim},
          {"seed", ec.seed},
          {"word_hash_scale", ec.word_hash_scale},
          {"pos_scale", ec.pos_scale},
          {"max_seq_len", ec.max_seq_len},
          {"attr_len", model.encoder->attr_len()},
          {"words", model.encoder->words()}}},
        {"config", json::object()},
        {"sections", sections},
    };
    // flat key=value config embedded as a JSON object
    const KVConfig kv = model.cfg.to_kv();
    for (const auto& k : kv.keys()) meta["config"][k] = kv.get_str(k);

    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open checkpoint for write: " + path);
    os.write(kCkptMagic, 8);
    const std::string meta_str = meta.dump();
    put_u32(os, static_cast<uint32_t>(meta_str.size()));
    os.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));

    for (const auto* p : store.all()) {
        write_section(os, "param:" + p->name, p->value);
        if (p->m.same_shape(p->value)) {
            write_section(os, "adam_m:" + p->name, p->m);
            write_section(os, "adam_v:" + p->name, p->v);
        }
    }
    write_section(os, "enc:word_matrix", model.encoder->word_matrix());
    write_section(os, "enc:lift", model.encoder->lift());
    write_section(os, "enc:mix1", model.encoder->mix1());
    write_section(os, "enc:mix2", model.encoder->mix2());
    write_section(os, "enc:pos", model.encoder->positions());
    write_section(os, "reg:family_anchors", model.region_encoder->family_anchors());
    write_section(os, "reg:texture_anchors", model.region_encoder->texture_anchors());
    if (!os) throw DataError("failed writing checkpoint: " + path);
}

nlohmann::json read_checkpoint_meta(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCkptMagic, 8) != 0)
        throw DataError("corrupt checkpoint: bad magic");
    const uint32_t len = get_u32(is);
    std::string meta_str(len, '\0');
    is.read(meta_str.data(), len);
    if (!is) throw DataError("corrupt checkpoint: truncated meta");
    try {
        return json::parse(meta_str);
    } catch (const json::exception& e) {
        throw DataError(std::string("corrupt checkpoint meta: ") + e.what());
    }
}

std::pair<std::unique_ptr<train::Model>, TrainerState> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCkptMagic, 8) != 0)
        throw DataError("corrupt checkpoint: bad magic");
    const uint32_t len = get_u32(is);
    std::string meta_str(len, '\0');
    is.read(meta_str.data(), len);
    if (!is) throw DataError("corrupt checkpoint: truncated meta");
    json meta;
    try {
        meta = json::parse(meta_str);
    } catch (const json::exception& e) {
        throw DataError(std::string("corrupt checkpoint meta: ") + e.what());
    }
    if (meta.at("format_version").get<int>() != 1)
        throw DataError("unknown checkpoint format version");

    const synth::CategorySet cats = cats_from_json(meta.at("category_set"));
    KVConfig kv;
    for (const auto& [k, v] : meta.at("config").items()) kv.set(k, v.get<std::string>());
    const train::TrainConfig cfg = train::TrainConfig::from_kv(kv);

    auto model = train::Model::build(cats, cfg);

    // read sections
    std::map<std::string, Tensor> blocks;
    while (true) {
        is.peek();
        if (is.eof()) break;
        const uint32_t nlen = get_u32(is);
        std::string name(nlen, '\0');
        is.read(name.data(), nlen);
        if (!is) throw DataError("corrupt checkpoint: truncated section name");
        blocks[name] = fsegio::to_tensor(fsegio::read_record(is));
    }

    auto need = [&](const std::string& name) -> Tensor& {
        auto it = blocks.find(name);
        if (it == blocks.end()) throw DataError("checkpoint missing section: " + name);
        return it->second;
    };

    // frozen encoders, reconstructed from the stored tensors
    const auto& je = meta.at("encoder");
    concepts::ConceptEncoderConfig ec;
    ec.token_dim = je.at("token_dim").get<int>();
    ec.out_dim = je.at("out_dim").get<int>();
    ec.seed = je.at("seed").get<uint64_t>();
    ec.word_hash_scale = je.at("word_hash_scale").get<double>();
    ec.pos_scale = je.at("pos_scale").get<double>();
    ec.max_seq_len = je.at("max_seq_len").get<int>();
    model->encoder = std::make_unique<concepts::ConceptEncoder>(
        ec, je.at("attr_len").get<int>(), je.at("words").get<std::vector<std::string>>(),
        std::move(need("enc:word_matrix")), std::move(need("enc:lift")),
        std::move(need("enc:mix1")), std::move(need("enc:mix2")), std::move(need("enc:pos")));
    model->region_encoder = std::make_unique<concepts::RegionEncoder>(
        *model->encoder, je.at("attr_len").get<int>() - 5,
        std::move(need("reg:family_anchors")), std::move(need("reg:texture_anchors")));

    for (auto* p : model->store.all()) {
        Tensor& v = need("param:" + p->name);
        if (!v.same_shape(p->value))
            throw DataError("checkpoint shape mismatch for parameter " + p->name);
        p->value = std::move(v);
        auto mit = blocks.find("adam_m:" + p->name);
        if (mit != blocks.end()) {
            p->m = std::move(mit->second);
            p->v = std::move(need("adam_v:" + p->name));
        }
    }

    TrainerState ts;
    ts.iteration = meta.at("iteration").get<int64_t>();
    ts.adam_t = meta.at("adam_t").get<int64_t>();
    const auto rs = meta.at("rng_state").get<std::vector<std::string>>();
    for (size_t i = 0; i < 4; ++i) ts.rng_state[i] = std::stoull(rs.at(i));
    return {std::move(model), ts};
}

uint64_t file_hash(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open for hashing: " + path);
    uint64_t h = 0xcbf29ce484222325ull;
    char buf[65536];
    while (is) {
        is.read(buf, sizeof(buf));
        h = fnv1a64(buf, static_cast<size_t>(is.gcount()), h);
    }
    return h;
}

} // namespace freeseg::ckpt
