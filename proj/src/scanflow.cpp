// scanflow: command-line entry points for ingest, training, evaluation,
// prediction, personalization, layout optimization, rendering and serving.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "scanflow/core.hpp"
#include "scanflow/layout.hpp"
#include "scanflow/metrics.hpp"
#include "scanflow/model.hpp"
#include "scanflow/reward.hpp"
#include "scanflow/service.hpp"
#include "scanflow/svg.hpp"
#include "scanflow/synthetic.hpp"
#include "scanflow/training.hpp"

using namespace scanflow;
using nlohmann::json;

namespace {

constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitTrain = 3;

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw ValidationError("cannot read " + p.string(), p.filename().string());
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

void write_file(const fs::path& p, const std::string& content) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out) throw Error("cannot write " + p.string());
    out << content;
}

std::string env_or(const char* name, const std::string& fallback) {
    const char* v = std::getenv(name);
    return v && *v ? v : fallback;
}

int fail(int code, const std::string& msg, const std::string& field = {}) {
    std::cerr << "error: " << msg;
    if (!field.empty()) std::cerr << " [field: " << field << "]";
    std::cerr << '\n';
    return code;
}

// -- synth --------------------------------------------------------------------

struct SynthArgs {
    std::string kind = "l";
    std::string out;
    std::uint64_t seed = 7;
};

int cmd_synth(const SynthArgs& a) {
    if (a.kind == "l") {
        synth::LCorpusOptions o;
        o.seed = a.seed;
        save_dataset(synth::make_l_corpus(o), a.out);
    } else if (a.kind == "archetype") {
        synth::ArchetypeCorpusOptions o;
        o.seed = a.seed;
        save_dataset(synth::make_archetype_corpus(o).dataset, a.out);
    } else {
        return fail(kExitConfig, "unknown corpus kind '" + a.kind + "' (l, archetype)", "kind");
    }
    std::cout << "wrote " << a.kind << " corpus to " << a.out << '\n';
    return 0;
}

// -- ingest -------------------------------------------------------------------

struct IngestArgs {
    std::string data;
    std::string out;
};

int cmd_ingest(const IngestArgs& a) {
    LoadReport rep;
    const auto ds = load_dataset(a.data, &rep);
    std::cout << "records read: " << rep.records_read << "\nrecords accepted: " << rep.records_accepted
              << "\nstimuli: " << ds.stimuli.size() << " (train " << ds.images(Split::Train).size() << ", test "
              << ds.images(Split::Test).size() << ")\nviewers: " << ds.viewers().size() << " (train "
              << ds.viewers(Split::Train).size() << ", test " << ds.viewers(Split::Test).size() << ")\n";
    for (const auto& r : rep.rejected) std::cerr << "warning: rejected line " << r.line << ": " << r.reason << '\n';
    if (!a.out.empty()) save_dataset(ds, a.out);
    return 0;
}

// -- train --------------------------------------------------------------------

struct TrainArgs {
    std::string config;
    std::string ablation;
    std::string out;
};

int cmd_train(const TrainArgs& a) {
    TrainConfig cfg;
    Dataset ds;
    std::unique_ptr<SaliencyProvider> env;
    try {
        const std::string text = read_file(a.config);
        json j;
        try {
            j = json::parse(text);
        } catch (const json::parse_error& e) {
            return fail(kExitConfig, std::string("config is not valid JSON: ") + e.what(), "config");
        }
        if (!a.ablation.empty()) {
            // the override is written into the config so the checkpoint header records it
            TrainConfig probe;
            apply_ablation(probe, a.ablation);
            j["use_rl"] = probe.use_rl && j.value("use_rl", true);
            j["use_r_sal"] = probe.reward.use_r_sal && j.value("use_r_sal", true);
            j["use_r_dtwd"] = probe.reward.use_r_dtwd && j.value("use_r_dtwd", true);
            j["use_ior"] = probe.reward.use_ior && j.value("use_ior", true);
        }
        if (!a.out.empty()) j["out_dir"] = a.out;
        cfg = parse_train_config(j);
        cfg.config_text = a.ablation.empty() && a.out.empty() ? text : j.dump(2);
        if (cfg.dataset.is_relative()) cfg.dataset = fs::path(a.config).parent_path() / cfg.dataset;
        if (!fs::is_directory(cfg.dataset))
            return fail(kExitConfig, "dataset path '" + cfg.dataset.string() + "' does not exist", "dataset");
        LoadReport rep;
        ds = load_dataset(cfg.dataset, &rep);
        for (const auto& r : rep.rejected) std::cerr << "warning: rejected line " << r.line << ": " << r.reason << '\n';
        if (cfg.saliency_dir.empty())
            env = std::make_unique<EmpiricalSaliencyProvider>(ds, cfg.display, cfg.model.w_inp, cfg.model.h_inp,
                                                              cfg.saliency_sigma_deg);
        else
            env = std::make_unique<FileSaliencyProvider>(cfg.saliency_dir, ds, cfg.display, cfg.model.w_inp,
                                                         cfg.model.h_inp);
    } catch (const ValidationError& e) {
        return fail(kExitConfig, e.what(), e.field());
    } catch (const FormatError& e) {
        return fail(kExitConfig, e.what());
    }
    try {
        PolicyModel model(cfg.model);
        const auto r = train(model, ds, *env, cfg, {[](const json& rec) {
                                 if (rec.value("phase", "") == "eval")
                                     std::cout << "epoch " << rec["epoch"] << " val DTW " << rec["val_dtw"] << '\n';
                             }});
        std::vector<Scanpath> preds;
        PatchCache cache(model);
        preds = predict_images(model, ds, ds.images(Split::Test), cache);
        const auto report = metrics::evaluate(preds, ds, {});
        write_file(cfg.out_dir / "eval.json", metrics::report_json(report).dump(2) + "\n");
        write_file(cfg.out_dir / "eval.txt", metrics::report_table(report));
        std::cout << "untrained val DTW " << r.initial_val_dtw << ", best " << r.best_val_dtw << " (epoch "
                  << r.best_epoch << ")\n"
                  << metrics::report_table(report);
    } catch (const ValidationError& e) {
        return fail(kExitConfig, e.what(), e.field());
    } catch (const std::exception& e) {
        return fail(kExitTrain, std::string("training aborted: ") + e.what());
    }
    return 0;
}

// -- eval ---------------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint;
    std::string data;
    std::string pairing = "pool";
    std::string out;
    std::string table;
    double radius = 0.05;
};

int cmd_eval(const EvalArgs& a) {
    const auto model = load_checkpoint(a.checkpoint);
    const auto ds = load_dataset(a.data);
    PatchCache cache(model);
    const auto preds = predict_images(model, ds, ds.images(Split::Test), cache);
    metrics::EvaluateOptions opt;
    if (a.pairing == "same-viewer") opt.pairing = metrics::Pairing::SameViewer;
    else if (a.pairing != "pool") return fail(kExitConfig, "pairing must be 'pool' or 'same-viewer'", "pairing");
    const auto report = metrics::evaluate(preds, ds, opt);
    json j = metrics::report_json(report);
    j["Laminarity"] = metrics::laminarity(preds, a.radius);
    const auto table = metrics::report_table(report);
    std::cout << table;
    if (!a.out.empty()) write_file(a.out, j.dump(2) + "\n");
    if (!a.table.empty()) write_file(a.table, table);
    return 0;
}

// -- predict ------------------------------------------------------------------

struct PredictArgs {
    std::string checkpoint;
    std::string image;
    std::string layout;
    std::string viewer;
    std::string mode = "greedy";
    std::uint64_t seed = 0;
    std::string out;
    std::string render;
};

int cmd_predict(const PredictArgs& a) {
    const auto model = load_checkpoint(a.checkpoint);
    std::optional<layout::LayoutSpec> lay;
    StimulusImage img;
    if (!a.layout.empty()) {
        lay = layout::load_spec(a.layout);
        img = layout::render_layout(*lay, fs::path(a.layout).stem().string());
    } else if (!a.image.empty()) {
        img = read_ppm(a.image, fs::path(a.image).stem().string());
    } else {
        return fail(kExitConfig, "predict needs --image or --layout", "image");
    }
    std::optional<std::string> viewer;
    if (!a.viewer.empty()) viewer = a.viewer;
    const auto r = model.rollout(img, viewer, parse_rollout_mode(a.mode), a.seed);
    const std::string line = serialize_record(r.path) + "\n";
    if (a.out.empty()) std::cout << line;
    else write_file(a.out, line);
    if (!a.render.empty()) write_file(a.render, svg::render(r.path, img.width, img.height, lay ? &*lay : nullptr));
    return 0;
}

// -- personalize --------------------------------------------------------------

struct PersonalizeArgs {
    std::string checkpoint;
    std::string data;
    std::string viewer;
    std::string records;
    std::string as;
    std::string out;
    PersonalizationConfig pcfg;
    bool unfreeze = false;
};

int cmd_personalize(const PersonalizeArgs& a) {
    auto loaded = load_checkpoint_full(a.checkpoint, Mode::Individual);
    const auto ds = load_dataset(a.data);
    std::vector<Scanpath> samples;
    if (!a.records.empty()) {
        std::ifstream in(a.records);
        if (!in) return fail(kExitConfig, "cannot read " + a.records, "records");
        std::string line;
        while (std::getline(in, line))
            if (!line.empty()) {
                const auto raw = parse_record(line);
                samples.push_back(normalize_scanpath(raw, ds.stimulus(raw.stimulus_id)));
            }
    } else {
        for (const auto* p : ds.select(Split::Train, std::nullopt))
            if (p->viewer_id == a.viewer) samples.push_back(*p);
    }
    auto pcfg = a.pcfg;
    pcfg.freeze_policy = !a.unfreeze;
    const std::string id = a.as.empty() ? a.viewer : a.as;
    const auto r = personalize(loaded.model, id, samples, ds, pcfg);
    std::cout << "personalized '" << id << "' on " << r.samples_used << " scanpaths: NLL " << r.initial_loss << " -> "
              << r.final_loss << '\n';
    save_checkpoint(loaded.model, a.out.empty() ? a.checkpoint : a.out, loaded.info);
    return 0;
}

// -- optimize -----------------------------------------------------------------

struct OptimizeArgs {
    std::string checkpoint;
    std::string layout;
    std::vector<std::string> order;
    std::string scope = "population";
    std::string mode = "greedy";
    int samples = 8;
    std::uint64_t seed = 0;
    std::string out;
    std::string svg_out;
};

int cmd_optimize(const OptimizeArgs& a) {
    const auto model = load_checkpoint(a.checkpoint);
    const auto spec = layout::load_spec(a.layout);
    const auto order = a.order.empty() ? spec.order : a.order;
    layout::ModelPredictorOptions po{parse_rollout_mode(a.mode), a.samples, a.seed};
    layout::ModelPredictor pred(model, po);
    layout::OptimizeOptions oo;
    if (a.scope != "population") oo.viewer = a.scope;
    const auto r = layout::optimize(spec, order, pred, oo);
    const auto j = layout::result_json(r);
    if (a.out.empty()) std::cout << j.dump(2) << '\n';
    else write_file(a.out, j.dump(2) + "\n");
    if (!a.svg_out.empty() && !r.per_viewer.empty())
        write_file(a.svg_out, svg::render(r.per_viewer.front().path, spec.canvas_w, spec.canvas_h, &r.layout));
    std::cerr << "constraint " << (r.constraint_satisfied ? "satisfied" : "not satisfied") << ", " << r.pass_count
              << "/" << r.viewer_count << " viewers, objective " << r.objective << " s over " << r.candidates
              << " candidates\n";
    return 0;
}

// -- render -------------------------------------------------------------------

struct RenderArgs {
    std::string record;
    std::string layout;
    int width = 512;
    int height = 512;
    std::string out;
};

int cmd_render(const RenderArgs& a) {
    std::ifstream in(a.record);
    if (!in) return fail(kExitConfig, "cannot read " + a.record, "record");
    std::string line;
    std::getline(in, line);
    const auto raw = parse_record(line);
    if (raw.space != CoordinateSpace::Normalized)
        return fail(kExitConfig, "render expects a normalized scanpath record", "space");
    Scanpath p{raw.stimulus_id, raw.viewer_id, raw.fixations};
    if (raw.unit == DurationUnit::Milliseconds)
        for (auto& f : p.fixations) f.t /= 1000.0;
    std::optional<layout::LayoutSpec> lay;
    int w = a.width, h = a.height;
    if (!a.layout.empty()) {
        lay = layout::load_spec(a.layout);
        w = lay->canvas_w;
        h = lay->canvas_h;
    }
    const auto s = svg::render(p, w, h, lay ? &*lay : nullptr);
    if (a.out.empty()) std::cout << s;
    else write_file(a.out, s);
    return 0;
}

// -- serve --------------------------------------------------------------------

struct ServeArgs {
    std::string checkpoint;
    std::string address;
    std::string data;
    std::string results;
};

service::Service* g_service = nullptr;

int cmd_serve(const ServeArgs& a) {
    const std::string address = a.address.empty() ? env_or("SCANFLOW_ADDRESS", "127.0.0.1:8080") : a.address;
    const std::string data = a.data.empty() ? env_or("SCANFLOW_DATA_ROOT", "") : a.data;
    const auto colon = address.rfind(':');
    if (colon == std::string::npos) return fail(kExitConfig, "address must be host:port", "address");
    const std::string host = address.substr(0, colon);
    int port = 0;
    try {
        port = std::stoi(address.substr(colon + 1));
    } catch (const std::exception&) {
        return fail(kExitConfig, "address must be host:port", "address");
    }
    std::optional<Dataset> ds;
    if (!data.empty()) ds = load_dataset(data);
    service::ServiceOptions opt;
    opt.results_dir = a.results;
    service::Service svc(load_checkpoint(a.checkpoint), std::move(ds), opt);
    g_service = &svc;
    std::signal(SIGINT, [](int) {
        if (g_service) g_service->stop();
    });
    std::signal(SIGTERM, [](int) {
        if (g_service) g_service->stop();
    });
    std::cerr << "serving on " << host << ":" << port << '\n';
    if (!svc.listen(host, port)) return fail(kExitError, "cannot bind " + address, "address");
    svc.shutdown();
    g_service = nullptr;
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"scanflow: scanpath prediction, personalization and visual-flow layout optimization"};
    app.require_subcommand(1);

    SynthArgs synth_a;
    auto* synth = app.add_subcommand("synth", "Write a scripted toy corpus");
    synth->add_option("--kind", synth_a.kind, "l or archetype");
    synth->add_option("--out", synth_a.out, "Output dataset directory")->required();
    synth->add_option("--seed", synth_a.seed);

    IngestArgs ingest_a;
    auto* ingest = app.add_subcommand("ingest", "Load, validate and report a dataset");
    ingest->add_option("--data", ingest_a.data, "Dataset root")->required();
    ingest->add_option("--out", ingest_a.out, "Write the canonical dataset here");

    TrainArgs train_a;
    auto* trn = app.add_subcommand("train", "Train a policy from a JSON config");
    trn->add_option("--config", train_a.config, "Config file")->required();
    trn->add_option("--ablation", train_a.ablation, "full, w/o-rl, w/o-r_sal, w/o-r_dtwd, w/o-ior");
    trn->add_option("--out", train_a.out, "Override out_dir");

    EvalArgs eval_a;
    auto* ev = app.add_subcommand("eval", "Evaluate greedy predictions on held-out images");
    ev->add_option("--checkpoint", eval_a.checkpoint)->required();
    ev->add_option("--data", eval_a.data)->required();
    ev->add_option("--pairing", eval_a.pairing, "pool or same-viewer");
    ev->add_option("--laminarity-radius", eval_a.radius);
    ev->add_option("--out", eval_a.out, "JSON report");
    ev->add_option("--table", eval_a.table, "Plain-text table");

    PredictArgs predict_a;
    auto* pred = app.add_subcommand("predict", "Predict a scanpath for an image or layout");
    pred->add_option("--checkpoint", predict_a.checkpoint)->required();
    pred->add_option("--image", predict_a.image, "PPM image");
    pred->add_option("--layout", predict_a.layout, "Layout spec JSON");
    pred->add_option("--viewer", predict_a.viewer);
    pred->add_option("--mode", predict_a.mode, "greedy or sample");
    pred->add_option("--seed", predict_a.seed);
    pred->add_option("--out", predict_a.out, "Scanpath JSON-line output");
    pred->add_option("--render", predict_a.render, "SVG overlay output");

    PersonalizeArgs pers_a;
    auto* pers = app.add_subcommand("personalize", "Fit a viewer embedding");
    pers->add_option("--checkpoint", pers_a.checkpoint)->required();
    pers->add_option("--data", pers_a.data)->required();
    pers->add_option("--viewer", pers_a.viewer, "Viewer whose training scanpaths are used")->required();
    pers->add_option("--records", pers_a.records, "Use these scanpath records instead");
    pers->add_option("--as", pers_a.as, "Register the embedding under this id");
    pers->add_option("--n-path", pers_a.pcfg.n_path);
    pers->add_option("--steps", pers_a.pcfg.steps);
    pers->add_option("--lr", pers_a.pcfg.lr);
    pers->add_option("--seed", pers_a.pcfg.seed);
    pers->add_flag("--unfreeze", pers_a.unfreeze, "Also update policy parameters");
    pers->add_option("--out", pers_a.out, "Output checkpoint (default: overwrite)");

    OptimizeArgs opt_a;
    auto* opt = app.add_subcommand("optimize", "Search a layout for the designer's order");
    opt->add_option("--checkpoint", opt_a.checkpoint)->required();
    opt->add_option("--layout", opt_a.layout)->required();
    opt->add_option("--order", opt_a.order, "Element ids, overrides the spec's order")->delimiter(',');
    opt->add_option("--scope", opt_a.scope, "population or a viewer id");
    opt->add_option("--mode", opt_a.mode, "greedy or sample (ensemble)");
    opt->add_option("--samples", opt_a.samples);
    opt->add_option("--seed", opt_a.seed);
    opt->add_option("--out", opt_a.out, "Result JSON");
    opt->add_option("--svg", opt_a.svg_out, "Overlay of the winning layout");

    RenderArgs render_a;
    auto* rnd = app.add_subcommand("render", "Draw a scanpath record as SVG");
    rnd->add_option("--record", render_a.record)->required();
    rnd->add_option("--layout", render_a.layout);
    rnd->add_option("--width", render_a.width);
    rnd->add_option("--height", render_a.height);
    rnd->add_option("--out", render_a.out);

    ServeArgs serve_a;
    auto* srv = app.add_subcommand("serve", "Run the HTTP service");
    srv->add_option("--checkpoint", serve_a.checkpoint)->required();
    srv->add_option("--address", serve_a.address, "host:port (env SCANFLOW_ADDRESS)");
    srv->add_option("--data", serve_a.data, "Dataset root (env SCANFLOW_DATA_ROOT)");
    srv->add_option("--results", serve_a.results, "Job result directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : kExitConfig;
    }

    try {
        if (*synth) return cmd_synth(synth_a);
        if (*ingest) return cmd_ingest(ingest_a);
        if (*trn) return cmd_train(train_a);
        if (*ev) return cmd_eval(eval_a);
        if (*pred) return cmd_predict(predict_a);
        if (*pers) return cmd_personalize(pers_a);
        if (*opt) return cmd_optimize(opt_a);
        if (*rnd) return cmd_render(render_a);
        if (*srv) return cmd_serve(serve_a);
    } catch (const ValidationError& e) {
        return fail(kExitConfig, e.what(), e.field());
    } catch (const std::exception& e) {
        return fail(kExitError, e.what());
    }
    return 0;
}
