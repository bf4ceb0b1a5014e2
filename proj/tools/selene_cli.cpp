// Experiment harness: dataset generation, training, evaluation, gradient
// checking and FLOPs reporting for the routing-network trainer.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "selene/selene.hpp"

namespace fs = std::filesystem;
using namespace selene;

namespace {

std::uint64_t resolve_seed(bool seed_given, std::uint64_t seed_value) {
    if (seed_given) return seed_value;
    if (const char* env = std::getenv("SELENE_SEED")) return std::strtoull(env, nullptr, 10);
    return seed_value;
}

std::string fraction_label(double fraction) {
    for (int den : {16, 8, 4, 2}) {
        if (std::abs(fraction - 1.0 / den) < 1e-12) return "1/" + std::to_string(den);
    }
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", fraction);
    return buf;
}

struct TrainCli {
    std::string data_dir;
    std::string split_file;
    std::string val_dir;
    std::string out_dir = "out";
    std::string resume;
    std::string method = "none";
    std::string sup_loss = "ce";
    TrainConfig train;
    RoutingConfig net;
};

int cmd_train(TrainCli& cli) {
    cli.train.method = parse_method(cli.method);
    if (cli.sup_loss == "ce") {
        cli.train.sup_loss = SupLossKind::CrossEntropy;
    } else if (cli.sup_loss == "ohem") {
        cli.train.sup_loss = SupLossKind::Ohem;
    } else {
        throw CLI::ValidationError("--sup-loss", "expected ce or ohem");
    }
    cli.train.validate();
    cli.net.validate();

    if (!fs::is_directory(cli.data_dir)) throw std::runtime_error("train: data directory not found: " + cli.data_dir);

    std::vector<std::string> labeled_ids, unlabeled_ids;
    if (!cli.split_file.empty()) {
        const SplitSpec split = read_split(cli.split_file);
        labeled_ids = split.labeled;
        unlabeled_ids = split.unlabeled;
    } else {
        labeled_ids = list_dataset_ids(cli.data_dir);
    }
    const std::vector<Sample> labeled = load_samples(cli.data_dir, labeled_ids, true);
    const std::vector<Sample> unlabeled = load_samples(cli.data_dir, unlabeled_ids, false);

    std::vector<Sample> val;
    if (!cli.val_dir.empty()) val = load_samples(cli.val_dir, list_dataset_ids(cli.val_dir), true);

    TrainState state(cli.train, cli.net);
    if (!cli.resume.empty()) {
        const Checkpoint ckpt = load_checkpoint(cli.resume);
        state.steps_per_epoch = static_cast<std::int64_t>(std::max(labeled.size(), unlabeled.size()));
        state.total_steps = state.steps_per_epoch * std::max(1, cli.train.epochs);
        restore_trainer_state(state, ckpt);
        std::cout << "resumed from " << cli.resume << " at step " << state.step << ", epoch " << state.epoch
                  << "\n";
    }

    const FitResult res = fit(state, labeled, unlabeled, val.empty() ? nullptr : &val, cli.out_dir);
    std::cout << "training complete: method=" << method_name(cli.train.method) << " epochs=" << cli.train.epochs
              << " steps=" << state.step << "\n";
    std::cout << "final miou=" << res.final_miou << " pixel_acc=" << res.final_pixel_acc << "\n";
    std::cout << "artifacts under " << cli.out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"selene: joint self-/semi-supervised dynamic-routing segmentation at desk scale"};
    app.require_subcommand(1);
    int threads = 1;
    app.add_option("--threads", threads, "worker threads for forward convolutions (1 = fully deterministic)")
        ->check(CLI::PositiveNumber);

    // --- gen-data ---
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic shapes dataset");
    std::string gen_out = "data";
    int gen_count = 64, gen_classes = 4, gen_size = 96;
    std::uint64_t gen_seed = 0;
    double gen_fraction = 0.0;
    auto* gen_seed_opt = gen->add_option("--seed", gen_seed, "generation seed");
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--count", gen_count, "number of samples")->check(CLI::PositiveNumber);
    gen->add_option("--classes", gen_classes, "number of classes including background");
    gen->add_option("--size", gen_size, "square image size (multiples of 96 satisfy every constraint)");
    gen->add_option("--fraction", gen_fraction, "also write a labeled/unlabeled split with this labeled fraction");

    // --- train ---
    auto* tr = app.add_subcommand("train", "run the training loop");
    tr->set_config("--config", "", "flat key=value config file; command-line flags override it");
    TrainCli tcli;
    std::uint64_t train_seed = 0;
    auto* train_seed_opt = tr->add_option("--seed", train_seed, "run seed (falls back to SELENE_SEED)");
    tr->add_option("--data", tcli.data_dir, "training dataset directory")->required();
    tr->add_option("--split", tcli.split_file, "split file; omitted = fully labeled");
    tr->add_option("--val", tcli.val_dir, "validation dataset directory");
    tr->add_option("--out", tcli.out_dir, "output directory for checkpoints and metrics");
    tr->add_option("--resume", tcli.resume, "checkpoint to resume from");
    tr->add_option("--method", tcli.method, "none|ssl_only|mean_teacher|co_teaching|full");
    tr->add_option("--lambda0", tcli.train.lambda0, "supervised loss weight");
    tr->add_option("--lambda1", tcli.train.lambda1, "self-supervised loss weight");
    tr->add_option("--lambda2", tcli.train.lambda2, "semi-supervised loss weight");
    tr->add_option("--alpha", tcli.train.alpha, "teacher EMA coefficient");
    tr->add_option("--lr0", tcli.train.lr0, "initial learning rate");
    tr->add_option("--momentum", tcli.train.momentum, "SGD momentum");
    tr->add_option("--poly-power", tcli.train.poly_power, "polynomial decay power");
    tr->add_option("--epochs", tcli.train.epochs, "training epochs");
    tr->add_option("--batch-labeled", tcli.train.batch_labeled, "labeled batch size");
    tr->add_option("--batch-unlabeled", tcli.train.batch_unlabeled, "unlabeled batch size");
    tr->add_option("--crop", tcli.train.crop_size, "training crop size");
    tr->add_option("--log-every", tcli.train.log_every, "csv row interval in iterations");
    tr->add_flag("!--no-augment", tcli.train.augment, "disable scale/flip/crop augmentation");
    tr->add_option("--sup-loss", tcli.sup_loss, "pixel loss: ce or ohem");
    tr->add_flag("--independent-teacher-aug", tcli.train.independent_teacher_aug,
                 "teacher sees its own augmentation draws");
    tr->add_flag("--jigsaw-segmentation", tcli.train.jigsaw_segmentation,
                 "also supervise segmentation on jigsawed labeled crops");
    tr->add_option("--layers", tcli.net.num_layers, "grid layers L");
    tr->add_option("--channels", tcli.net.base_channels, "base channel count C0");
    tr->add_option("--classes", tcli.net.num_classes, "segmentation classes");
    tr->add_option("--permutations", tcli.net.num_permutations, "jigsaw permutation count k");

    // --- eval ---
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    std::string ev_ckpt, ev_data, ev_csv, ev_model = "student";
    ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--csv", ev_csv, "append a result row to this csv file");
    ev->add_option("--model", ev_model, "which stored model to evaluate: student|teacher|peer_b");

    // --- gradcheck ---
    auto* gc = app.add_subcommand("gradcheck", "finite-difference verification of every op");
    std::uint64_t gc_seed = 12345;
    double gc_tol = 1e-4;
    gc->add_option("--seed", gc_seed, "tensor seed");
    gc->add_option("--tol", gc_tol, "relative tolerance");

    // --- flops ---
    auto* fl = app.add_subcommand("flops", "multiply-add count of a checkpointed network");
    std::string fl_ckpt;
    int fl_size = 96, fl_batch = 1;
    std::vector<double> fl_taus{0.0};
    fl->add_option("--checkpoint", fl_ckpt, "checkpoint file")->required();
    fl->add_option("--size", fl_size, "input spatial size");
    fl->add_option("--batch", fl_batch, "input batch size");
    fl->add_option("--tau", fl_taus, "gate activation threshold(s)");

    CLI11_PARSE(app, argc, argv);

    try {
        set_num_threads(threads);

        if (gen->parsed()) {
            const std::uint64_t seed = resolve_seed(gen_seed_opt->count() > 0, gen_seed);
            const auto samples = gen_shapes_dataset(gen_count, gen_classes, gen_size, seed);
            save_dataset(gen_out, samples);
            std::cout << "wrote " << samples.size() << " samples to " << gen_out << "\n";
            if (gen_fraction > 0.0) {
                SplitSpec spec = make_split(samples, gen_fraction, fraction_label(gen_fraction), seed);
                const auto path = fs::path(gen_out) / split_filename(spec);
                write_split(path, spec);
                std::cout << "split " << path.string() << ": " << spec.labeled.size() << " labeled / "
                          << spec.unlabeled.size() << " unlabeled\n";
            }
            return 0;
        }

        if (tr->parsed()) {
            tcli.train.seed = resolve_seed(train_seed_opt->count() > 0, train_seed);
            return cmd_train(tcli);
        }

        if (ev->parsed()) {
            if (ev_model != "student" && ev_model != "teacher" && ev_model != "peer_b")
                throw std::runtime_error("eval: unknown --model " + ev_model);
            const Checkpoint ckpt = load_checkpoint(ev_ckpt);
            const RoutingNet net = net_from_checkpoint(ckpt, ev_model + ".");
            const auto samples = load_samples(ev_data, list_dataset_ids(ev_data), true);
            const EvalResult res = evaluate(net, samples);
            std::cout << "model=" << ev_model << " miou=" << res.miou << " pixel_acc=" << res.pixel_acc
                      << " images=" << samples.size() << "\n";
            if (!ev_csv.empty()) {
                const bool fresh = !fs::exists(ev_csv);
                std::ofstream os(ev_csv, std::ios::app);
                if (!os) throw std::runtime_error("eval: cannot open " + ev_csv);
                if (fresh) os << "checkpoint,dataset,miou,pixel_acc\n";
                os << ev_ckpt << ',' << ev_data << ',' << res.miou << ',' << res.pixel_acc << '\n';
            }
            return 0;
        }

        if (gc->parsed()) {
            const auto results = run_gradcheck_suite(gc_seed, gc_tol);
            bool all_pass = true;
            std::printf("%-24s %-12s %-10s %s\n", "op", "max rel err", "checked", "status");
            for (const auto& r : results) {
                std::printf("%-24s %-12.3e %-10zu %s\n", r.name.c_str(), r.max_rel_err, r.checked,
                            r.pass ? "pass" : "FAIL");
                all_pass = all_pass && r.pass;
            }
            std::printf("gradcheck: %s (tol %.1e)\n", all_pass ? "all ops pass" : "FAILURES", gc_tol);
            return all_pass ? 0 : 1;
        }

        if (fl->parsed()) {
            const Checkpoint ckpt = load_checkpoint(fl_ckpt);
            const RoutingNet net = net_from_checkpoint(ckpt, "student.");
            for (double tau : fl_taus) {
                const std::uint64_t macs = count_flops(net, {fl_batch, 3, fl_size, fl_size}, tau);
                std::cout << "tau=" << tau << " macs=" << macs << "\n";
            }
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
