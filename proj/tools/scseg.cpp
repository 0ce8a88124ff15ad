// scseg command-line entry point.
//
//   scseg gen-data --spec spec.json --out data/
//   scseg train --config cfg.json --data data/manifest.json --out run/
//   scseg eval --checkpoint run/checkpoint --data data/manifest_test.json --out eval/
//   scseg gradcheck | oracle-check | info --checkpoint run/checkpoint
//
// Flags override values read from a config file. Every command prints its
// resolved configuration, and commands with an output directory also save it there.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "scseg/config.hpp"
#include "scseg/trainer.hpp"
#include "scseg/verify.hpp"

namespace fs = std::filesystem;
using scseg::Json;

namespace {

template <typename V>
void override_field(Json& j, const char* key, const std::optional<V>& v) {
    if (v) j[key] = *v;
}

void print_config(const char* what, const Json& j) { std::cout << "# resolved " << what << "\n" << j.dump(2) << "\n"; }

int print_checks(const std::vector<scseg::verify::CheckResult>& results) {
    bool ok = true;
    for (const auto& r : results) {
        std::printf("%-48s error %.3e  tol %.0e  %s\n", r.name.c_str(), r.error, r.tolerance, r.passed ? "ok" : "FAIL");
        ok = ok && r.passed;
    }
    std::printf("%zu checks, %s\n", results.size(), ok ? "all within tolerance" : "FAILURES");
    return ok ? 0 : 1;
}

struct GenData {
    fs::path spec, out;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> train, val, test, uncorrected;
    std::optional<double> flip_rate;

    int run() const {
        Json j = spec.empty() ? Json::object() : scseg::read_json_file(spec);
        override_field(j, "seed", seed);
        override_field(j, "train", train);
        override_field(j, "val", val);
        override_field(j, "test", test);
        override_field(j, "uncorrected", uncorrected);
        override_field(j, "flip_rate", flip_rate);
        const scseg::DatasetSpec ds = scseg::dataset_spec_from_json(j);
        const Json resolved = scseg::to_json(ds);
        print_config("dataset spec", resolved);
        const auto paths = scseg::generate_dataset(ds, out);
        scseg::write_json_file(out / "dataset_spec.json", resolved);
        std::cout << "wrote " << paths.train << ", " << paths.val << ", " << paths.test << "\n";
        return 0;
    }
};

struct Train {
    fs::path config, data, out;
    std::optional<std::size_t> steps, proxies, patch, batch, checkpoint_every;
    std::optional<double> lr, lambda, tau;
    std::optional<std::uint64_t> init_seed, sampling_seed;
    std::optional<std::string> variant;
    std::optional<bool> balanced;
    std::vector<int> channels;
    bool quiet = false;

    int run() const {
        Json j = config.empty() ? Json::object() : scseg::read_json_file(config);
        override_field(j, "steps", steps);
        override_field(j, "proxies_per_class", proxies);
        override_field(j, "patch_size", patch);
        override_field(j, "batch_size", batch);
        override_field(j, "checkpoint_every", checkpoint_every);
        override_field(j, "lr", lr);
        override_field(j, "lambda_ctr", lambda);
        override_field(j, "tau", tau);
        override_field(j, "init_seed", init_seed);
        override_field(j, "sampling_seed", sampling_seed);
        override_field(j, "variant", variant);
        override_field(j, "balanced", balanced);
        if (!channels.empty()) j["channels"] = channels;
        const scseg::TrainConfig cfg = scseg::train_config_from_json(j);

        const auto subjects = scseg::load_subjects(scseg::read_manifest(data), cfg.network.classes);
        Json resolved = scseg::to_json(cfg);
        resolved["data"] = fs::absolute(data).string();
        print_config("train config", resolved);

        scseg::TrainOptions opts;
        opts.out_dir = out;
        const std::size_t every = std::max<std::size_t>(1, cfg.steps / 20);
        opts.on_step = [&](const scseg::LogRow& r) {
            if (!quiet && (r.step % every == 0 || r.step == 1 || r.step == cfg.steps)) {
                std::printf("step %6zu  ce %.4f  ctr %.4f  total %.4f  %.0f ms\n", r.step, r.ce, r.ctr, r.total, r.wall_ms);
                std::fflush(stdout);
            }
        };
        scseg::train(cfg, subjects, opts);
        scseg::write_json_file(out / "resolved_config.json", resolved);
        std::cout << "checkpoint " << (out / "checkpoint") << "\n";
        return 0;
    }
};

struct Eval {
    fs::path checkpoint, data, out;
    std::optional<std::size_t> overlap;
    bool margin = false;

    int run() const {
        scseg::Model model = scseg::load_checkpoint(checkpoint);
        const std::size_t ov = overlap.value_or(model.config.overlap());
        const auto subjects = scseg::load_subjects(scseg::read_manifest(data), model.config.network.classes);
        Json resolved;
        resolved["schema_version"] = scseg::kConfigSchemaVersion;
        resolved["checkpoint"] = fs::absolute(checkpoint).string();
        resolved["data"] = fs::absolute(data).string();
        resolved["overlap"] = ov;
        resolved["margin"] = margin;
        resolved["model"] = scseg::to_json(model.config);
        print_config("eval config", resolved);

        const auto reports = scseg::evaluate_model(model, subjects, ov);
        const int C = model.config.network.classes;
        scseg::write_report_table(std::cout, reports, C);
        if (margin) {
            std::printf("feature separation margin %.4f\n", scseg::feature_separation_margin(model, subjects, ov));
        }
        if (!out.empty()) {
            fs::create_directories(out);
            std::ofstream json(out / "report.json"), table(out / "report.txt"), csv(out / "report.csv");
            scseg::write_report_json(json, reports, C);
            scseg::write_report_table(table, reports, C);
            scseg::write_report_csv(csv, reports, C);
            if (!json || !table || !csv) throw std::runtime_error("failed writing reports under " + out.string());
            scseg::write_json_file(out / "eval_config.json", resolved);
        }
        return 0;
    }
};

int info(const fs::path& checkpoint) {
    const Json meta = scseg::read_json_file(checkpoint / "checkpoint.json");
    std::cout << "step            " << meta.at("step") << "\n";
    std::size_t total = 0;
    for (const auto& p : meta.at("parameters")) total += p.at("count").get<std::size_t>();
    std::cout << "parameters      " << meta.at("parameters").size() << " tensors, " << total << " values\n";
    for (const auto& p : meta.at("parameters")) std::cout << "  " << p.at("name").get<std::string>() << " " << p.at("shape").dump() << "\n";
    print_config("checkpoint metadata", meta);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Supervised contrastive tissue segmentation on synthetic phantoms"};
    app.require_subcommand(1);

    GenData gen;
    auto* g = app.add_subcommand("gen-data", "Generate a phantom dataset and manifests");
    g->add_option("--spec", gen.spec, "Dataset spec JSON")->check(CLI::ExistingFile);
    g->add_option("--out", gen.out, "Output directory")->required();
    g->add_option("--seed", gen.seed);
    g->add_option("--train", gen.train);
    g->add_option("--val", gen.val);
    g->add_option("--test", gen.test);
    g->add_option("--uncorrected", gen.uncorrected);
    g->add_option("--flip-rate", gen.flip_rate);

    Train tr;
    auto* t = app.add_subcommand("train", "Train a model");
    t->add_option("--config", tr.config, "Train config JSON")->check(CLI::ExistingFile);
    t->add_option("--data", tr.data, "Training manifest")->required()->check(CLI::ExistingFile);
    t->add_option("--out", tr.out, "Run directory")->required();
    t->add_option("--steps", tr.steps);
    t->add_option("--lr", tr.lr);
    t->add_option("--lambda", tr.lambda, "Contrastive weight");
    t->add_option("--tau", tr.tau);
    t->add_option("--proxies", tr.proxies, "Proxies per class");
    t->add_option("--patch", tr.patch);
    t->add_option("--batch", tr.batch);
    t->add_option("--checkpoint-every", tr.checkpoint_every);
    t->add_option("--init-seed", tr.init_seed);
    t->add_option("--sampling-seed", tr.sampling_seed);
    t->add_option("--variant", tr.variant)->check(CLI::IsMember({"exp", "literal"}));
    t->add_option("--balanced", tr.balanced, "true|false");
    t->add_option("--channels", tr.channels, "Input channels to use")->delimiter(',');
    t->add_flag("--quiet", tr.quiet);

    Eval ev;
    auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
    e->add_option("--checkpoint", ev.checkpoint)->required()->check(CLI::ExistingDirectory);
    e->add_option("--data", ev.data)->required()->check(CLI::ExistingFile);
    e->add_option("--out", ev.out, "Report directory");
    e->add_option("--overlap", ev.overlap, "Tile overlap in voxels");
    e->add_flag("--margin", ev.margin, "Also report the feature separation margin");

    std::uint64_t gc_seed = 0;
    std::size_t gc_repeats = 20;
    auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
    gc->add_option("--seed", gc_seed);
    gc->add_option("--repeats", gc_repeats, "Random seeds per operation")->check(CLI::PositiveNumber);

    std::uint64_t oc_seed = 0;
    auto* oc = app.add_subcommand("oracle-check", "Brute-force loss and metric oracles");
    oc->add_option("--seed", oc_seed);

    fs::path info_ckpt;
    auto* in = app.add_subcommand("info", "Print checkpoint metadata");
    in->add_option("--checkpoint", info_ckpt)->required()->check(CLI::ExistingDirectory);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*g) return gen.run();
        if (*t) return tr.run();
        if (*e) return ev.run();
        if (*gc) {
            print_config("gradcheck", Json{{"seed", gc_seed}, {"repeats", gc_repeats}, {"step", scseg::verify::kGradStep},
                                           {"tolerance", scseg::verify::kGradTolerance}});
            return print_checks(scseg::verify::gradient_suite(gc_seed, gc_repeats));
        }
        if (*oc) {
            print_config("oracle-check", Json{{"seed", oc_seed}});
            return print_checks(scseg::verify::oracle_suite(oc_seed));
        }
        if (*in) return info(info_ckpt);
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 2;
    }
    return 1;
}
