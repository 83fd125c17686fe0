// volt3d command-line front end.
//
// Subcommands: params (parameter tables + reductions), flops (cost formulas,
// optionally cross-checked against the brute-force oracle), gen-data
// (synthetic voxel datasets on disk), train-cls / train-rec (the two task
// loops), eval (metrics from a checkpoint).
//
// Exit codes: 0 success, 1 usage error, 2 runtime error, 3 failed
// verification (`flops --verify` mismatch).

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "volt3d/oracle.hpp"
#include "volt3d/thread_pool.hpp"
#include "volt3d/training.hpp"
#include "volt3d/voxio.hpp"

namespace {

using namespace volt3d;

constexpr std::uint64_t kModelSeedTag = 0x3d0de1;

int usage_error(const std::string& message) {
    std::cerr << "error: " << message << "\n";
    return 1;
}

void apply_threads(unsigned threads) {
    if (threads == 0) {
        threads = std::thread::hardware_concurrency();
        if (threads == 0) threads = 1;
    }
    set_num_threads(threads);
}

std::string fixed2(double value) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", value);
    return buf;
}

std::string fixed6(double value) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", value);
    return buf;
}

// ---------------------------------------------------------------------------
// params
// ---------------------------------------------------------------------------

struct ParamsOpts {
    std::string arch;
    std::string flavor = "standard";
    std::string convention = "paper";
    std::string format = "table";
};

int run_params(const ParamsOpts& o) {
    const auto flavor = parse_flavor(o.flavor);
    const auto report = cost_report(build_spec(o.arch, flavor, 64, 13));
    const bool csv = o.format == "csv";
    const bool decoder = o.arch.rfind("rec", 0) == 0 || o.arch.rfind("resrec", 0) == 0;

    std::cout << (csv ? render_cost_csv(report) : render_cost_table(report));

    if (flavor != ConvFlavor::standard) {
        const auto base = cost_report(build_spec(o.arch, ConvFlavor::standard, 64, 13));
        const double conv_red = percent_reduction(base.conv_params, report.conv_params);
        if (csv) {
            std::cout << "reduction_conv,percent," << fixed2(conv_red) << "\n";
        } else {
            std::cout << "reduction vs standard (conv layers): " << fixed2(conv_red) << "%\n";
        }
        if (o.convention == "all") {
            const double all_red = percent_reduction(base.all_params, report.all_params);
            if (csv) {
                std::cout << "reduction_all,percent," << fixed2(all_red) << "\n";
            } else {
                std::cout << "reduction vs standard (all parameters): " << fixed2(all_red)
                          << "%\n";
            }
        } else if (decoder) {
            const double total_red = percent_reduction(base.table_total, report.table_total);
            if (csv) {
                std::cout << "reduction_total,percent," << fixed2(total_red) << "\n";
            } else {
                std::cout << "reduction vs standard (decoder total): " << fixed2(total_red)
                          << "%\n";
            }
        }
    }
    return 0;
}

// ---------------------------------------------------------------------------
// flops
// ---------------------------------------------------------------------------

struct FlopsOpts {
    std::size_t k = 3;
    std::size_t cin = 0;
    std::size_t cout = 0;
    std::vector<std::size_t> dhw;
    bool verify = false;
    std::string format = "table";
};

int run_flops(const FlopsOpts& o) {
    if (o.dhw.size() != 3) return usage_error("--dhw takes three comma-separated extents, e.g. 4,4,4");
    if (o.k == 0 || o.cin == 0 || o.cout == 0 || o.dhw[0] == 0 || o.dhw[1] == 0 || o.dhw[2] == 0) {
        return usage_error("flops arguments must all be positive");
    }
    const std::size_t d = o.dhw[0], h = o.dhw[1], w = o.dhw[2];
    const auto std_macs = macs_standard(o.k, o.cin, o.cout, d, h, w);
    const auto dw_macs = macs_dwsep(o.k, o.cin, o.cout, d, h, w);
    const auto ps_macs = macs_pseudo(o.k, o.cin, o.cout, d, h, w);
    const auto r_std = ratio_dwsep_over_standard(o.k, o.cout);
    const auto r_ps = ratio_dwsep_over_pseudo(o.k, o.cin, o.cout);
    const double k3 = static_cast<double>(o.k) * o.k * o.k;

    if (o.format == "csv") {
        std::cout << "quantity,value\n";
        std::cout << "standard_macs," << std_macs << "\n";
        std::cout << "dwsep_macs," << dw_macs << "\n";
        std::cout << "pseudo_macs," << ps_macs << "\n";
        std::cout << "dwsep_over_standard," << r_std.str() << "\n";
        std::cout << "dwsep_over_standard_value," << fixed6(r_std.value()) << "\n";
        std::cout << "dwsep_over_pseudo," << r_ps.str() << "\n";
        std::cout << "dwsep_over_pseudo_value," << fixed6(r_ps.value()) << "\n";
    } else {
        std::cout << "macs (k=" << o.k << ", cin=" << o.cin << ", cout=" << o.cout << ", extent "
                  << d << "x" << h << "x" << w << "):\n";
        std::cout << "  standard  " << std_macs << "\n";
        std::cout << "  dwsep     " << dw_macs << "\n";
        std::cout << "  pseudo    " << ps_macs << "\n";
        std::cout << "dwsep:standard = " << r_std.str() << " = 1/" << o.cout << " + 1/"
                  << static_cast<std::uint64_t>(k3) << " = " << fixed6(r_std.value()) << "\n";
        std::cout << "dwsep:pseudo   = " << r_ps.str() << " = " << fixed6(r_ps.value())
                  << "  (~ k/cin = " << fixed6(static_cast<double>(o.k) / o.cin) << ")\n";
    }

    if (o.verify) {
        if (d > 16 || h > 16 || w > 16 || o.cin > 32 || o.cout > 32) {
            std::cerr << "error: --verify runs the brute-force oracle, which accepts extents "
                         "<= 16 and channels <= 32\n";
            return 2;
        }
        auto x = Tensor<double>::randn({1, o.cin, d, h, w}, Seed{17});
        oracle::MacCounter std_count, dw_count, ps_count;
        oracle::naive_conv3d_same(x, Tensor<double>::randn({o.cout, o.cin, o.k, o.k, o.k}, Seed{18}),
                                  &std_count);
        auto mid = oracle::naive_depthwise_same(
            x, Tensor<double>::randn({o.cin, o.k, o.k, o.k}, Seed{19}), Tensor<double>({o.cin}),
            &dw_count);
        oracle::naive_pointwise(mid, Tensor<double>::randn({o.cout, o.cin}, Seed{20}),
                                Tensor<double>({o.cout}), &dw_count);
        oracle::naive_pseudo(x, Tensor<double>::randn({o.cin, o.cin, 1, o.k, o.k}, Seed{21}),
                             Tensor<double>::randn({o.cout, o.cin, o.k, 1, 1}, Seed{22}),
                             &ps_count);
        const bool ok = std_count.count == std_macs && dw_count.count == dw_macs &&
                        ps_count.count == ps_macs;
        if (!ok) {
            std::cerr << "verify FAILED: oracle counted " << std_count.count << "/"
                      << dw_count.count << "/" << ps_count.count << ", formulas give " << std_macs
                      << "/" << dw_macs << "/" << ps_macs << "\n";
            return 3;
        }
        if (o.format == "csv") {
            std::cout << "verify,ok\n";
        } else {
            std::cout << "verify: ok (oracle multiply counts match all three formulas)\n";
        }
    }
    return 0;
}

// ---------------------------------------------------------------------------
// dataset plumbing
// ---------------------------------------------------------------------------

std::vector<ClassificationSample> synthetic_cls(std::size_t samples, std::size_t resolution,
                                                std::uint64_t seed, std::size_t classes) {
    std::vector<ClassificationSample> data;
    for (std::size_t i = 0; i < samples; ++i) {
        const std::size_t cat = i % classes;
        data.push_back({make_solid(cat, resolution, subseed(Seed{seed}, i)),
                        static_cast<int>(cat)});
    }
    return data;
}

struct LoadedDataset {
    std::vector<ClassificationSample> samples;
    std::size_t resolution = 0;
    std::uint64_t seed = 0;
};

LoadedDataset load_dataset_dir(const std::string& dir) {
    const std::string manifest_path = dir + "/manifest.csv";
    std::ifstream manifest(manifest_path);
    if (!manifest) throw IoError(IoErrorKind::file_missing, "cannot open '" + manifest_path + "'");
    std::string line;
    std::getline(manifest, line);
    if (line != "# volt3d-dataset v1") {
        throw IoError(IoErrorKind::bad_magic, "'" + manifest_path + "' is not a dataset manifest");
    }
    LoadedDataset out;
    std::size_t declared = 0;
    std::getline(manifest, line);
    if (std::sscanf(line.c_str(), "# resolution=%zu seed=%" SCNu64 " samples=%zu",
                    &out.resolution, &out.seed, &declared) != 3) {
        throw IoError(IoErrorKind::bad_header, "'" + manifest_path + "': bad metadata line");
    }
    std::getline(manifest, line);
    if (line != "file,label") {
        throw IoError(IoErrorKind::bad_header, "'" + manifest_path + "': missing column header");
    }
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) {
            throw IoError(IoErrorKind::bad_header, "'" + manifest_path + "': bad row '" + line + "'");
        }
        const std::string file = line.substr(0, comma);
        const int label = std::stoi(line.substr(comma + 1));
        auto grid = read_vox3(dir + "/" + file);
        if (grid.extent(0) != out.resolution) {
            throw IoError(IoErrorKind::shape_mismatch,
                          "'" + file + "' has resolution " + std::to_string(grid.extent(0)) +
                              ", manifest declares " + std::to_string(out.resolution));
        }
        out.samples.push_back({std::move(grid), label});
    }
    if (out.samples.size() != declared) {
        throw IoError(IoErrorKind::bad_header,
                      "'" + manifest_path + "': declares " + std::to_string(declared) +
                          " samples, lists " + std::to_string(out.samples.size()));
    }
    return out;
}

// Latents are a pure function of (dataset seed, sample index), so datasets
// loaded from disk get the same codes the in-memory generator would produce.
std::vector<ReconstructionSample> to_reconstruction(const LoadedDataset& data, double noise) {
    const LatentEncoder encoder(Seed{data.seed});
    std::vector<ReconstructionSample> out;
    for (std::size_t i = 0; i < data.samples.size(); ++i) {
        out.push_back({encoder.encode(data.samples[i].grid,
                                      subseed(Seed{data.seed}, kNoiseSeedOffset + i), noise),
                       data.samples[i].grid});
    }
    return out;
}

std::size_t classes_from_labels(const std::vector<ClassificationSample>& data) {
    int top = 0;
    for (const auto& s : data) top = std::max(top, s.label);
    return static_cast<std::size_t>(top) + 1;
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenDataOpts {
    std::string out;
    std::size_t samples = 26;
    std::size_t resolution = 16;
    std::uint64_t seed = 1;
    std::string dtype = "packed";
    std::string format = "table";
};

int run_gen_data(const GenDataOpts& o) {
    std::filesystem::create_directories(o.out);
    std::ofstream manifest(o.out + "/manifest.csv", std::ios::trunc);
    if (!manifest) throw IoError(IoErrorKind::file_missing, "cannot create manifest in " + o.out);
    manifest << "# volt3d-dataset v1\n";
    manifest << "# resolution=" << o.resolution << " seed=" << o.seed << " samples=" << o.samples
             << "\n";
    manifest << "file,label\n";
    for (std::size_t i = 0; i < o.samples; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "sample_%04zu.vox", i);
        const std::size_t cat = i % kNumCategories;
        write_vox3(o.out + "/" + name, make_solid(cat, o.resolution, subseed(Seed{o.seed}, i)),
                   o.dtype == "packed");
        manifest << name << "," << cat << "\n";
    }
    if (o.format == "csv") {
        std::cout << "out,samples,resolution,seed\n";
        std::cout << o.out << "," << o.samples << "," << o.resolution << "," << o.seed << "\n";
    } else {
        std::cout << "wrote " << o.samples << " samples (" << o.resolution << "^3, seed " << o.seed
                  << ") to " << o.out << "\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------
// train-cls / train-rec
// ---------------------------------------------------------------------------

struct TrainOpts {
    std::string arch;
    std::string flavor = "standard";
    std::size_t epochs = 5;
    double lr = 1e-3;
    std::size_t batch = 8;
    std::size_t samples = 26;
    std::size_t resolution = 16;
    std::uint64_t seed = 1;
    std::size_t classes = kNumCategories;
    double noise = 0.01;
    std::string data;
    std::string history;
    std::string out;
    std::string preset;
    unsigned threads = 0;
    std::string format = "table";
};

TrainConfig config_for(const TrainOpts& o, bool reconstruction) {
    TrainConfig cfg;
    if (o.preset == "paper-cls") {
        cfg = classifier_reference_config();
    } else if (o.preset == "paper-rec") {
        cfg = reconstruction_reference_config();
    } else {
        cfg.schedule = {{o.epochs, o.lr}};
        cfg.batch_size = o.batch;
    }
    (void)reconstruction;
    cfg.seed = Seed{o.seed};
    return cfg;
}

void write_history_file(const std::string& path, const std::vector<EpochStats>& history) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError(IoErrorKind::file_missing, "cannot create '" + path + "'");
    out << history_csv(history);
    std::cerr << "wrote history to " << path << "\n";
}

void print_history(const std::vector<EpochStats>& history, const std::string& format,
                   const char* metric_name) {
    if (format == "csv") {
        std::cout << history_csv(history);
        return;
    }
    for (const auto& row : history) {
        std::cout << "epoch " << row.epoch << ": lr=" << row.lr << " loss=" << row.loss << " "
                  << metric_name << "=" << row.metric << "\n";
    }
}

int run_train_cls(const TrainOpts& o) {
    apply_threads(o.threads);
    std::vector<ClassificationSample> data;
    std::size_t resolution = o.resolution;
    std::size_t classes = o.classes;
    if (!o.data.empty()) {
        auto loaded = load_dataset_dir(o.data);
        data = std::move(loaded.samples);
        resolution = loaded.resolution;
        classes = classes_from_labels(data);
    } else {
        if (classes < 2 || classes > kNumCategories) {
            return usage_error("--classes must be between 2 and " +
                               std::to_string(kNumCategories));
        }
        data = synthetic_cls(o.samples, resolution, o.seed, classes);
    }

    const auto spec = build_spec(o.arch, parse_flavor(o.flavor), resolution, classes);
    auto model = build_runtime<float>(spec, subseed(Seed{o.seed}, kModelSeedTag));
    std::cerr << "train-cls arch=" << o.arch << " flavor=" << o.flavor << " resolution="
              << resolution << " samples=" << data.size() << " params="
              << group_digits(model.param_count()) << " threads=" << num_threads() << "\n";

    const auto cfg = config_for(o, false);
    const auto history = train_classifier(model, data, cfg);
    print_history(history, o.format, "accuracy");
    write_history_file(o.history.empty() ? "history_cls.csv" : o.history, history);
    if (!o.out.empty()) {
        write_checkpoint(o.out, spec.arch, spec.flavor, model.params());
        std::cerr << "wrote checkpoint to " << o.out << "\n";
    }
    return 0;
}

int run_train_rec(const TrainOpts& o) {
    apply_threads(o.threads);
    std::vector<ReconstructionSample> data;
    if (!o.data.empty()) {
        auto loaded = load_dataset_dir(o.data);
        if (loaded.resolution != 32) {
            return usage_error("train-rec needs 32^3 grids, dataset has resolution " +
                               std::to_string(loaded.resolution));
        }
        data = to_reconstruction(loaded, o.noise);
    } else {
        data = make_reconstruction_dataset(o.samples, 32, Seed{o.seed}, o.noise);
    }

    const auto spec = build_spec(o.arch, parse_flavor(o.flavor), 32, kNumCategories);
    auto model = build_runtime<float>(spec, subseed(Seed{o.seed}, kModelSeedTag));
    std::cerr << "train-rec arch=" << o.arch << " flavor=" << o.flavor << " samples="
              << data.size() << " params=" << group_digits(model.param_count()) << " threads="
              << num_threads() << "\n";

    const auto cfg = config_for(o, true);
    const auto history = train_reconstructor(model, data, cfg);
    print_history(history, o.format, "miou");
    write_history_file(o.history.empty() ? "history_rec.csv" : o.history, history);
    if (!o.out.empty()) {
        write_checkpoint(o.out, spec.arch, spec.flavor, model.params());
        std::cerr << "wrote checkpoint to " << o.out << "\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalOpts {
    std::string task;
    std::string checkpoint;
    std::string data;
    std::size_t samples = 13;
    std::size_t resolution = 16;
    std::uint64_t seed = 901;
    std::size_t classes = kNumCategories;
    double noise = 0.0;
    std::string report;
    unsigned threads = 0;
    std::string format = "table";
};

int run_eval(const EvalOpts& o) {
    apply_threads(o.threads);
    const auto header = read_checkpoint_header(o.checkpoint);
    const auto flavor = parse_flavor(header.flavor);

    if (o.task == "cls") {
        std::vector<ClassificationSample> data;
        std::size_t resolution = o.resolution;
        std::size_t classes = o.classes;
        if (!o.data.empty()) {
            auto loaded = load_dataset_dir(o.data);
            data = std::move(loaded.samples);
            resolution = loaded.resolution;
            classes = classes_from_labels(data);
        } else {
            data = synthetic_cls(o.samples, resolution, o.seed, classes);
        }
        auto model = build_runtime<float>(build_spec(header.arch, flavor, resolution, classes),
                                          Seed{0});
        read_checkpoint_into(o.checkpoint, model.params());
        const double acc = evaluate_classifier(model, data);
        if (o.format == "csv") {
            std::cout << "metric,value\naccuracy," << fixed6(acc) << "\n";
        } else {
            std::cout << "accuracy: " << fixed6(acc) << " (" << data.size() << " samples, "
                      << header.arch << "/" << header.flavor << ")\n";
        }
        return 0;
    }

    // reconstruction
    std::vector<ReconstructionSample> data;
    if (!o.data.empty()) {
        auto loaded = load_dataset_dir(o.data);
        if (loaded.resolution != 32) {
            return usage_error("eval --task rec needs 32^3 grids, dataset has resolution " +
                               std::to_string(loaded.resolution));
        }
        data = to_reconstruction(loaded, o.noise);
    } else {
        data = make_reconstruction_dataset(o.samples, 32, Seed{o.seed}, o.noise);
    }
    auto model = build_runtime<float>(build_spec(header.arch, flavor, 32, kNumCategories),
                                      Seed{0});
    read_checkpoint_into(o.checkpoint, model.params());
    const auto sweep = evaluate_reconstructor(model, data);

    std::ostringstream csv;
    csv << "threshold,miou,best\n";
    for (std::size_t i = 0; i < sweep.entries.size(); ++i) {
        csv << sweep.entries[i].threshold << "," << fixed6(sweep.entries[i].value) << ","
            << (i == sweep.best_index ? 1 : 0) << "\n";
    }
    if (o.format == "csv") {
        std::cout << csv.str();
    } else {
        for (std::size_t i = 0; i < sweep.entries.size(); ++i) {
            std::cout << "t=" << fixed2(sweep.entries[i].threshold)
                      << "  mIoU=" << fixed6(sweep.entries[i].value);
            if (i == sweep.best_index) std::cout << "  <-- best";
            std::cout << "\n";
        }
    }
    if (!o.report.empty()) {
        std::ofstream report(o.report, std::ios::trunc);
        if (!report) throw IoError(IoErrorKind::file_missing, "cannot create '" + o.report + "'");
        report << csv.str();
        std::cerr << "wrote threshold report to " << o.report << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"3D convolution cost modelling, training and evaluation toolkit"};
    app.require_subcommand(1);

    const std::vector<std::string> decoder_archs = {"rec6", "resrec6", "rec16", "resrec16"};
    const std::vector<std::string> table_archs = {"rec6",  "resrec6", "rec16", "resrec16",
                                                  "vgg13", "vgg16",   "vgg19"};
    const std::vector<std::string> cls_archs = {"vgg13", "vgg16", "vgg19", "tiny"};
    const std::vector<std::string> flavors = {"standard", "pseudo", "dw"};
    const std::vector<std::string> formats = {"table", "csv"};

    ParamsOpts params;
    auto* params_cmd = app.add_subcommand("params", "Parameter counts per layer with reductions "
                                                    "against the standard flavor");
    params_cmd->add_option("--arch", params.arch, "architecture")
        ->required()
        ->check(CLI::IsMember(table_archs));
    params_cmd->add_option("--flavor", params.flavor, "convolution flavor")
        ->check(CLI::IsMember(flavors));
    params_cmd->add_option("--convention", params.convention,
                           "paper: reference-table accounting; all: count every parameter")
        ->check(CLI::IsMember({"paper", "all"}));
    params_cmd->add_option("--format", params.format, "output format")
        ->check(CLI::IsMember(formats));

    FlopsOpts flops;
    auto* flops_cmd = app.add_subcommand("flops", "Multiply-accumulate counts for one conv layer "
                                                  "in all three flavors");
    flops_cmd->add_option("--k", flops.k, "kernel size");
    flops_cmd->add_option("--cin", flops.cin, "input channels")->required();
    flops_cmd->add_option("--cout", flops.cout, "output channels")->required();
    flops_cmd->add_option("--dhw", flops.dhw, "output extents d,h,w")->required()->delimiter(',');
    flops_cmd->add_flag("--verify", flops.verify,
                        "cross-check the formulas against the instrumented brute-force kernels "
                        "(small shapes only); mismatch exits 3");
    flops_cmd->add_option("--format", flops.format, "output format")->check(CLI::IsMember(formats));

    GenDataOpts gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "Write a deterministic synthetic voxel dataset");
    gen_cmd->add_option("--out", gen.out, "output directory")->required();
    gen_cmd->add_option("--samples", gen.samples, "sample count");
    gen_cmd->add_option("--resolution", gen.resolution, "cube resolution");
    gen_cmd->add_option("--seed", gen.seed, "dataset seed");
    gen_cmd->add_option("--dtype", gen.dtype, "voxel payload encoding")
        ->check(CLI::IsMember({"packed", "f32"}));
    gen_cmd->add_option("--format", gen.format, "output format")->check(CLI::IsMember(formats));

    auto add_train_common = [&](CLI::App* cmd, TrainOpts& o) {
        cmd->add_option("--epochs", o.epochs, "epochs for the single-span schedule");
        cmd->add_option("--lr", o.lr, "learning rate for the single-span schedule");
        cmd->add_option("--batch", o.batch, "batch size");
        cmd->add_option("--samples", o.samples, "synthetic sample count (ignored with --data)");
        cmd->add_option("--seed", o.seed, "seed for data, model init and shuffling");
        cmd->add_option("--data", o.data, "dataset directory from gen-data");
        cmd->add_option("--history", o.history, "history CSV path");
        cmd->add_option("--out", o.out, "checkpoint path to write");
        cmd->add_option("--threads", o.threads, "worker threads (default: logical cores)")
            ->envname("VOLT3D_THREADS");
        cmd->add_option("--format", o.format, "output format")->check(CLI::IsMember(formats));
    };

    TrainOpts train_cls;
    train_cls.arch = "tiny";
    auto* train_cls_cmd = app.add_subcommand("train-cls", "Train a voxel classifier");
    train_cls_cmd->add_option("--arch", train_cls.arch, "classifier architecture")
        ->check(CLI::IsMember(cls_archs));
    train_cls_cmd->add_option("--flavor", train_cls.flavor, "convolution flavor")
        ->check(CLI::IsMember(flavors));
    train_cls_cmd->add_option("--resolution", train_cls.resolution,
                              "synthetic grid resolution (ignored with --data)");
    train_cls_cmd->add_option("--classes", train_cls.classes, "number of shape categories");
    train_cls_cmd
        ->add_option("--preset", train_cls.preset,
                     "paper-cls: 20 epochs, 10 at 1e-5 then 10 at 1e-6, batch 8")
        ->check(CLI::IsMember({"paper-cls"}));
    add_train_common(train_cls_cmd, train_cls);

    TrainOpts train_rec;
    train_rec.arch = "rec6";
    train_rec.samples = 10;
    auto* train_rec_cmd = app.add_subcommand("train-rec",
                                             "Train a latent-to-voxel reconstruction decoder "
                                             "(32^3 outputs)");
    train_rec_cmd->add_option("--arch", train_rec.arch, "decoder architecture")
        ->check(CLI::IsMember(decoder_archs));
    train_rec_cmd->add_option("--flavor", train_rec.flavor, "convolution flavor")
        ->check(CLI::IsMember(flavors));
    train_rec_cmd->add_option("--noise", train_rec.noise, "latent noise standard deviation");
    train_rec_cmd
        ->add_option("--preset", train_rec.preset,
                     "paper-rec: 120 epochs, 60 at 1e-6 then 60 at 1e-7, batch 32")
        ->check(CLI::IsMember({"paper-rec"}));
    add_train_common(train_rec_cmd, train_rec);

    EvalOpts eval;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
    eval_cmd->add_option("--task", eval.task, "cls: accuracy; rec: per-threshold mIoU")
        ->required()
        ->check(CLI::IsMember({"cls", "rec"}));
    eval_cmd->add_option("--checkpoint", eval.checkpoint, "checkpoint file")->required();
    eval_cmd->add_option("--data", eval.data, "dataset directory from gen-data");
    eval_cmd->add_option("--samples", eval.samples, "synthetic sample count (ignored with --data)");
    eval_cmd->add_option("--resolution", eval.resolution,
                         "synthetic grid resolution for cls (ignored with --data)");
    eval_cmd->add_option("--seed", eval.seed, "synthetic dataset seed");
    eval_cmd->add_option("--classes", eval.classes, "number of shape categories");
    eval_cmd->add_option("--noise", eval.noise, "latent noise for rec data");
    eval_cmd->add_option("--report", eval.report, "write the rec threshold sweep to this CSV");
    eval_cmd->add_option("--threads", eval.threads, "worker threads (default: logical cores)")
        ->envname("VOLT3D_THREADS");
    eval_cmd->add_option("--format", eval.format, "output format")->check(CLI::IsMember(formats));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*params_cmd) return run_params(params);
        if (*flops_cmd) return run_flops(flops);
        if (*gen_cmd) return run_gen_data(gen);
        if (*train_cls_cmd) return run_train_cls(train_cls);
        if (*train_rec_cmd) return run_train_rec(train_rec);
        if (*eval_cmd) return run_eval(eval);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
