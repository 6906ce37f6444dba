"""
PanopticRoad command line

Trains, validates and runs the multi-task road-scene model (vehicle
detection plus drivable-area and lane-line segmentation), benchmarks its
throughput, writes the synthetic road-scene dataset and inspects the gated
fusions of a checkpoint.

### Commands:
- `train`:   train a model into a run directory (config snapshot, metrics.csv,
             weights/last.pt and weights/best.pt, curve plots).
- `val`:     full metrics suite of a checkpoint with the evaluation thresholds.
- `predict`: overlays and a JSON prediction dump with the predict thresholds.
- `bench`:   frames per second of the eval-mode forward at given batch sizes.
- `synth`:   write the synthetic dataset.
- `gates`:   raw weight, logistic value and active branch of every gated fusion.
- `params`:  per-component parameter counts of a model.

```bash
panroad train --data synthetic --scale n --epochs 5 --out runs/smoke
panroad val runs/smoke/weights/best.pt --data runs/smoke/synthetic
panroad predict runs/smoke/weights/best.pt images/ --out runs/predict
```

Every option of the run config can be overridden with dotted key=value
arguments after the command, for example `optim.lr0=0.02 model.acm=false`.
The device can be forced with the PANROAD_DEVICE environment variable.

### Exit codes:
    0 success, 1 usage or configuration error, 2 data error, 3 numerical failure
"""

from PanopticRoad.config import RunConfig, config_from_dict, load_config, merge_config, resolve_device, validate_config
from PanopticRoad.errors import EXIT_OK, EXIT_USAGE, PanopticRoadError, exit_code_for
from PanopticRoad.model import build_model, component_parameters, gate_states, load_checkpoint
from PanopticRoad.logs import close_file_handlers, configure_logging
from PanopticRoad.synthetic import generate_synthetic, resolve_data_root
from PanopticRoad.dataset import build_dataloader, build_dataset
from PanopticRoad.evaluate import evaluate, write_report
from PanopticRoad.predictor import Predictor, list_images
from PanopticRoad.metrics import benchmark_fps, fps_spread
from PanopticRoad.trainer import Trainer
from omegaconf import OmegaConf
import argparse
import logging
import sys
import os

from colorama import init, Fore, Style
init()

logger = logging.getLogger("panopticroad")

LOG_FILE = "panopticroad.log"


class bcolors:
    HEADER = '\033[95m'   # Magenta
    OKBLUE = '\033[94m'   # Blue
    OKCYAN = '\033[96m'   # Cyan
    OKGREEN = '\033[92m'  # Green
    WARNING = '\033[93m'  # Yellow
    FAIL = '\033[91m'     # Red
    ENDC = '\033[0m'      # Reset to default
    BOLD = '\033[1m'
    UNDERLINE = '\033[4m'


class UsageError(Exception):
    """argparse usage error, reported with exit code 1."""


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def add_common(parser):
    parser.add_argument('-c', '--config', type=str, default=None,
                        help='YAML config file with nested keys (see configs/default.yaml). Keys left out keep their defaults.')
    parser.add_argument('-D', '--debug', action='store_true', help='Enable debug logging on the console')
    parser.add_argument('-v', '--verbose', action='store_true', help='Log progress messages (INFO) on the console')
    parser.add_argument('--no-log-file', action='store_true',
                        help='Do not write panopticroad.log into the output directory')
    parser.add_argument('--device', type=str, default=None,
                        help='Torch device, e.g. cpu, cuda or cuda:1. The PANROAD_DEVICE environment variable takes precedence.')
    parser.add_argument('overrides', nargs='*', metavar='KEY=VALUE',
                        help='Dotted config overrides applied last, e.g. optim.lr0=0.02')


def parse_arguments(argv=None):
    parser = ArgumentParser(prog='panroad', description='Multi-task road-scene perception: detection plus drivable-area and lane segmentation.')
    commands = parser.add_subparsers(dest='command', metavar='COMMAND', parser_class=ArgumentParser)
    commands.required = True

    train = commands.add_parser('train', help='Train a model into a run directory')
    train.add_argument('--data', type=str, default=None,
                       help='Dataset root, or "synthetic" to generate the synthetic dataset inside the run directory. Default: data.root of the config.')
    train.add_argument('--scale', type=str, choices=['n', 's'], default=None, help='Model scale (nano or small)')
    train.add_argument('--seg-tasks', type=str, nargs='+', default=None, metavar='TASK',
                       help='Segmentation tasks, one neck and head each. Default: drivable lane')
    train.add_argument('--epochs', type=int, default=None,
                       help='Maximum epochs. Unless optim.patience is given, patience is capped at epochs - 1.')
    train.add_argument('-b', '--batch', type=int, default=None, help='Batch size (optim.batch_size)')
    train.add_argument('--input-size', type=int, default=None, help='Square network input side, a multiple of 32')
    train.add_argument('--seed', type=int, default=None, help='Run seed')
    train.add_argument('--no-acm', action='store_true', help='Use fixed concatenations instead of the gated fusions')
    train.add_argument('-o', '--out', type=str, default=None, help='Run directory. Default: out_dir of the config (runs/train)')
    train.add_argument('--resume', action='store_true',
                       help='Continue from <out>/weights/last.pt, reusing <out>/config.yaml unless --config is given')
    train.add_argument('--no-spinner', action='store_true', help='Disable the terminal spinner')
    add_common(train)

    val = commands.add_parser('val', help='Evaluate a checkpoint')
    val.add_argument('checkpoint', type=str, help='Checkpoint file (.pt)')
    val.add_argument('--data', type=str, default=None,
                     help='Dataset root, or "synthetic". Default: the data root stored in the checkpoint.')
    val.add_argument('--split', type=str, choices=['train', 'val'], default='val', help='Split to evaluate. Default: val')
    val.add_argument('-b', '--batch', type=int, default=None, help='Batch size')
    val.add_argument('--fps', action='store_true', help='Also measure FPS at batch size 1 and add it to the report')
    val.add_argument('-o', '--out', type=str, default='runs/val', help='Report directory. Default: runs/val')
    add_common(val)

    predict = commands.add_parser('predict', help='Run a checkpoint on images')
    predict.add_argument('checkpoint', type=str, help='Checkpoint file (.pt)')
    predict.add_argument('source', type=str, help='Image file or directory of images')
    predict.add_argument('--conf', type=float, default=None, help='Confidence threshold. Default: thresholds.predict.conf (0.25)')
    predict.add_argument('--iou', type=float, default=None, help='NMS IoU threshold. Default: thresholds.predict.nms_iou (0.45)')
    predict.add_argument('--no-overlays', action='store_true', help='Only write predictions.json')
    predict.add_argument('-o', '--out', type=str, default='runs/predict', help='Output directory. Default: runs/predict')
    add_common(predict)

    bench = commands.add_parser('bench', help='Measure inference throughput')
    bench.add_argument('--checkpoint', type=str, default=None,
                       help='Checkpoint file. Without it a freshly initialized model of --scale is measured.')
    bench.add_argument('--scale', type=str, choices=['n', 's'], default='n', help='Scale of the fresh model')
    bench.add_argument('--batch-sizes', type=int, nargs='+', default=[1, 32], help='Batch sizes to measure. Default: 1 32')
    bench.add_argument('--input-size', type=int, default=None, help='Input side. Default: the model input size (640)')
    bench.add_argument('--warmup', type=int, default=10, help='Untimed warmup iterations. Default: 10')
    bench.add_argument('--iters', type=int, default=50, help='Timed iterations. Default: 50')
    bench.add_argument('--repeats', type=int, default=1, help='Repeat every measurement to show its spread. Default: 1')
    add_common(bench)

    synth = commands.add_parser('synth', help='Write the synthetic road-scene dataset')
    synth.add_argument('out', type=str, help='Dataset root to write')
    synth.add_argument('--train', type=int, default=8, help='Training scenes. Default: 8')
    synth.add_argument('--val', type=int, default=8, help='Validation scenes. Default: 8')
    synth.add_argument('--size', type=int, default=640, help='Image side in pixels. Default: 640')
    synth.add_argument('--seed', type=int, default=0, help='Dataset seed. Default: 0')
    synth.add_argument('-D', '--debug', action='store_true', help='Enable debug logging on the console')
    synth.add_argument('-v', '--verbose', action='store_true', help='Log progress messages (INFO) on the console')

    gates = commands.add_parser('gates', help='Show the gated fusion states of a checkpoint')
    gates.add_argument('checkpoint', type=str, help='Checkpoint file (.pt)')
    gates.add_argument('-D', '--debug', action='store_true', help='Enable debug logging on the console')
    gates.add_argument('-v', '--verbose', action='store_true', help='Log progress messages (INFO) on the console')

    params = commands.add_parser('params', help='Per-component parameter counts')
    params.add_argument('--checkpoint', type=str, default=None, help='Count a checkpoint instead of a fresh model')
    params.add_argument('--scale', type=str, choices=['n', 's'], default='n', help='Model scale. Default: n')
    params.add_argument('--seg-tasks', type=str, nargs='+', default=['drivable', 'lane'], metavar='TASK',
                        help='Segmentation tasks. Default: drivable lane')
    params.add_argument('--no-acm', action='store_true', help='Fixed concatenations instead of gated fusions')
    params.add_argument('-D', '--debug', action='store_true', help='Enable debug logging on the console')
    params.add_argument('-v', '--verbose', action='store_true', help='Log progress messages (INFO) on the console')

    return parser.parse_args(argv)


def console_level(args):
    if getattr(args, 'debug', False):
        return logging.DEBUG
    if getattr(args, 'verbose', False):
        return logging.INFO
    return logging.WARNING


def setup_logging(args, out_dir=None):
    log_file = None
    if out_dir and not getattr(args, 'no_log_file', False):
        os.makedirs(out_dir, exist_ok=True)
        log_file = os.path.join(out_dir, LOG_FILE)
    configure_logging(console_level(args), log_file)


def train_overrides(args):
    overrides = []
    if args.data is not None:
        overrides.append(f"data.root={args.data}")
    if args.scale is not None:
        overrides.append(f"model.scale={args.scale}")
    if args.seg_tasks is not None:
        overrides.append(f"model.seg_tasks=[{','.join(args.seg_tasks)}]")
    if args.epochs is not None:
        overrides.append(f"optim.epochs_max={args.epochs}")
    if args.batch is not None:
        overrides.append(f"optim.batch_size={args.batch}")
    if args.input_size is not None:
        overrides.append(f"model.input_size={args.input_size}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.no_acm:
        overrides.append("model.acm=false")
    if args.out is not None:
        overrides.append(f"out_dir={args.out}")
    return overrides + list(args.overrides)


def cap_patience(cfg, overrides):
    """Keeps patience below a shortened epoch cap unless patience was set explicitly."""
    if any(o.startswith("optim.patience=") for o in overrides):
        return cfg
    if cfg.optim.patience >= cfg.optim.epochs_max:
        cfg.optim.patience = max(cfg.optim.epochs_max - 1, 0)
        logger.info(f"optim.patience capped to {cfg.optim.patience} for {cfg.optim.epochs_max} epochs")
    return cfg


def load_train_config(args):
    overrides = train_overrides(args)
    config_path = args.config
    if args.resume and config_path is None:
        snapshot = os.path.join(args.out or "runs/train", "config.yaml")
        if os.path.isfile(snapshot):
            config_path = snapshot
    cfg = merge_config(OmegaConf.structured(RunConfig), config_path, overrides)
    cfg = cap_patience(cfg, overrides)
    validate_config(cfg)
    return cfg


def checkpoint_config(ckpt, args, extra=()):
    """Run config stored in a checkpoint, with the command's overrides applied."""
    if ckpt.get("config"):
        cfg = config_from_dict(ckpt["config"])
    else:
        cfg = load_config()
        cfg.model.seg_tasks = list(ckpt["model_config"]["seg_tasks"])
    cfg = merge_config(cfg, args.config, list(extra) + list(getattr(args, 'overrides', [])))
    validate_config(cfg)
    return cfg


def cmd_train(args):
    cfg = load_train_config(args)
    run_dir = cfg.out_dir
    setup_logging(args, run_dir)
    print(f"{bcolors.BOLD}{bcolors.OKCYAN}Training into {run_dir}, please wait...{bcolors.ENDC}")
    trainer = Trainer(cfg, run_dir, resume=args.resume, spinner=not args.no_spinner, device=args.device)
    try:
        with trainer:
            result = trainer.train()
    except KeyboardInterrupt:
        print(f"{bcolors.WARNING}Training interrupted by user, resume with --resume --out {run_dir}{bcolors.ENDC}")
        return EXIT_OK
    stop = "early stop" if result.stopped_early else "epoch cap"
    print(f"{Fore.GREEN}Finished after epoch {result.epochs_run} ({stop}), best fitness "
          f"{result.best_fitness:.5f} at epoch {result.best_epoch}{Style.RESET_ALL}")
    print(f"Best checkpoint: {os.path.join(run_dir, 'weights', 'best.pt')}")
    return EXIT_OK


def print_report(report):
    for line in report.lines():
        key, sep, value = line.partition(": ")
        if sep:
            print(f"{Fore.CYAN}{key:<24}{Style.RESET_ALL}{value}")
        else:
            print(line)


def cmd_val(args):
    setup_logging(args, args.out)
    device = resolve_device(args.device or "cuda")
    model, ckpt = load_checkpoint(args.checkpoint, device)
    extra = [f"data.root={args.data}"] if args.data is not None else []
    if args.batch is not None:
        extra.append(f"optim.batch_size={args.batch}")
    cfg = checkpoint_config(ckpt, args, extra)
    root = resolve_data_root(cfg, args.out)
    dataset = build_dataset(cfg, args.split, root, augment_enabled=False)
    loader = build_dataloader(dataset, cfg.optim.batch_size, workers=cfg.data.workers, seed=cfg.seed)
    thresholds = cfg.thresholds.eval
    report = evaluate(model, loader, thresholds.conf, thresholds.nms_iou, device, list(cfg.data.class_names))
    if args.fps:
        report.metrics["fps"] = benchmark_fps(model, 1, device=device).fps
    write_report(report, args.out)
    print_report(report)
    print(f"{Fore.GREEN}Report written to {args.out}{Style.RESET_ALL}")
    return EXIT_OK


def cmd_predict(args):
    setup_logging(args, args.out)
    device = resolve_device(args.device or "cuda")
    model, ckpt = load_checkpoint(args.checkpoint, device)
    cfg = checkpoint_config(ckpt, args)
    conf = args.conf if args.conf is not None else cfg.thresholds.predict.conf
    iou = args.iou if args.iou is not None else cfg.thresholds.predict.nms_iou
    paths = list_images(args.source)
    predictor = Predictor(model, conf, iou, list(cfg.data.class_names), device)
    results = predictor.predict_paths(paths, args.out, save_overlays=not args.no_overlays)
    skipped = len(paths) - len(results)
    print(f"{Fore.GREEN}{len(results)} images predicted{Style.RESET_ALL}"
          + (f", {Fore.YELLOW}{skipped} skipped{Style.RESET_ALL}" if skipped else ""))
    print(f"Predictions written to {os.path.join(args.out, 'predictions')}")
    return EXIT_OK


def cmd_bench(args):
    setup_logging(args)
    device = resolve_device(args.device or "cuda")
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint, device)
    else:
        cfg = load_config(args.config, [f"model.scale={args.scale}"] + list(args.overrides))
        model = build_model(cfg).to(device)
    for batch_size in args.batch_sizes:
        reports = []
        for _ in range(args.repeats):
            report = benchmark_fps(model, batch_size, args.warmup, args.iters, args.input_size, device)
            reports.append(report)
            print(f"{Fore.CYAN}bs={batch_size:<3}{Style.RESET_ALL} {report}")
        if len(reports) > 1:
            print(f"{Fore.CYAN}bs={batch_size:<3}{Style.RESET_ALL} spread {fps_spread(reports):.1%} "
                  f"over {len(reports)} runs")
    return EXIT_OK


def cmd_synth(args):
    setup_logging(args)
    generate_synthetic(args.out, args.train, args.val, args.size, args.seed)
    print(f"{Fore.GREEN}Wrote {args.train} train and {args.val} val scenes to {args.out}{Style.RESET_ALL}")
    return EXIT_OK


def cmd_gates(args):
    setup_logging(args)
    model, _ = load_checkpoint(args.checkpoint)
    rows = gate_states(model)
    print(f"{bcolors.BOLD}{'task':<12}{'level':<16}{'weight':>10}{'gate':>10}  branch{bcolors.ENDC}")
    for row in rows:
        color = Fore.GREEN if row["branch"] == "concat" else Fore.YELLOW
        print(f"{row['task']:<12}{row['level']:<16}{row['weight']:>10.5f}{row['gate']:>10.5f}  "
              f"{color}{row['branch']}{Style.RESET_ALL}")
    return EXIT_OK


def cmd_params(args):
    setup_logging(args)
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
    else:
        overrides = [f"model.scale={args.scale}", f"model.seg_tasks=[{','.join(args.seg_tasks)}]"]
        if args.no_acm:
            overrides.append("model.acm=false")
        model = build_model(load_config(overrides=overrides))
    print(f"{bcolors.BOLD}{'component':<28}{'parameters':>14}{bcolors.ENDC}")
    for name, count in component_parameters(model).items():
        style = Style.BRIGHT if name == "total" else ""
        print(f"{style}{name:<28}{count:>14,}{Style.RESET_ALL}")
    return EXIT_OK


COMMANDS = {
    'train': cmd_train,
    'val': cmd_val,
    'predict': cmd_predict,
    'bench': cmd_bench,
    'synth': cmd_synth,
    'gates': cmd_gates,
    'params': cmd_params,
}


def main(argv=None):
    """
    Entry point of the panroad console script.

    Returns:
        int: Process exit code.
    """
    try:
        args = parse_arguments(argv)
    except UsageError as e:
        print(f"{bcolors.FAIL}{e}{bcolors.ENDC}", file=sys.stderr)
        return EXIT_USAGE

    try:
        return COMMANDS[args.command](args)
    except KeyboardInterrupt:
        print(f"{bcolors.WARNING}Exiting application due to keyboard interrupt{bcolors.ENDC}")
        return EXIT_OK
    except (PanopticRoadError, ValueError, OSError) as e:
        logger.debug("Command failed", exc_info=True)
        code = exit_code_for(e)
        print(f"{bcolors.FAIL}Error: {e}{bcolors.ENDC}", file=sys.stderr)
        return code
    finally:
        close_file_handlers()


if __name__ == '__main__':
    sys.exit(main())
