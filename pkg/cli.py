#!/usr/bin/env python3
"""
動態場景 Gaussian SLAM CLI - 統一的命令列工具

功能：
1. 產生合成動態 RGB-D 序列（TUM 目錄格式）
2. 執行完整追蹤 / 建圖管線並輸出軌跡、地圖與報告
3. 計算 ATE（RMSE / STD）
4. 以儲存的地圖渲染影像或動態遮罩
5. 消融實驗（關閉 CRF / 光流 / 懲罰 / 建圖）

使用範例：
    # 產生預設場景
    python cli.py simulate default data/sim

    # 執行管線
    python cli.py run data/sim --config slam.env --out output/run

    # 評估軌跡
    python cli.py eval output/run/trajectory.txt data/sim/groundtruth.txt

    # 渲染地圖
    python cli.py render output/run/map.npz output/run/trajectory.txt render.png --mask

    # 消融實驗
    python cli.py ablate data/sim --disable crf flow penalty

結束代碼：0 成功 / 1 設定錯誤 / 2 資料錯誤 / 3 執行期失敗
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from dotenv import load_dotenv

# 載入環境變數（.env 檔案）
load_dotenv()

# 添加專案根目錄到 path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config import PROFILES, load_config, write_config_template
from utils.dataset_io import (load_map, load_tum_sequence, read_camera, read_trajectory, save_map,
                              write_camera, write_report, write_sequence, write_trajectory)
from utils.errors import ConfigError, DataError, InsufficientDataError, SlamError
from utils.evaluation import evaluate_ate
from utils.gaussian_map import DYNAMIC
from utils.pipeline import SequenceInput, run_sequence
from utils.scene_sim import SceneSpec, simulate_sequence
from utils.schema_validator import SchemaValidator
from utils.splat_render import composite, params_from_map, render_label_mask, write_image

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3


class Colors:
    """終端機顏色"""
    HEADER = '\033[95m'
    BLUE = '\033[94m'
    CYAN = '\033[96m'
    GREEN = '\033[92m'
    YELLOW = '\033[93m'
    RED = '\033[91m'
    RESET = '\033[0m'
    BOLD = '\033[1m'


def print_header(text):
    """印出標題"""
    print(f"\n{Colors.BOLD}{Colors.BLUE}{'=' * 60}{Colors.RESET}")
    print(f"{Colors.BOLD}{Colors.CYAN}{text}{Colors.RESET}")
    print(f"{Colors.BOLD}{Colors.BLUE}{'=' * 60}{Colors.RESET}\n")


def print_success(text):
    """印出成功訊息"""
    print(f"{Colors.GREEN}✓ {text}{Colors.RESET}")


def print_error(text):
    """印出錯誤訊息"""
    print(f"{Colors.RED}✗ {text}{Colors.RESET}")


def print_warning(text):
    """印出警告訊息"""
    print(f"{Colors.YELLOW}⚠ {text}{Colors.RESET}")


def print_info(text):
    """印出資訊"""
    print(f"{Colors.CYAN}ℹ {text}{Colors.RESET}")


def load_scene_spec(source: str) -> SceneSpec:
    """
    讀取場景規格

    Args:
        source: JSON 檔案路徑，或 'default'

    Raises:
        DataError: 檔案不存在或不是合法 JSON
        ConfigError: 不符合 scene_spec_schema
    """
    if source == 'default':
        return SceneSpec()
    path = Path(source)
    if not path.exists():
        raise DataError('找不到場景規格檔', str(path))
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f'JSON 格式錯誤: {e.msg}', str(path), e.lineno) from None

    validator = SchemaValidator()
    valid, errors = validator.validate(data, 'scene_spec_schema')
    if not valid:
        raise ConfigError('場景規格驗證失敗：' + '；'.join(errors))
    return SceneSpec.from_dict(data)


def _print_report(report: dict):
    print_info(f"影格: {report['frames']}，關鍵影格: {report['keyframes']}，"
               f"追蹤失敗: {report['tracking_failures']}")
    print_info(f"ATE RMSE: {report['ate_rmse']:.4f} m，STD: {report['ate_std']:.4f} m")
    print_info(f"動態標籤 precision: {report['label_precision']:.3f}，recall: {report['label_recall']:.3f}")
    print_info(f"誤判動態（CRF 後 / 光流恢復後）: {report['false_dynamic_crf']} / "
               f"{report['false_dynamic_recovered']}")
    print_info(f"渲染 PSNR: {report['render_psnr']:.2f} dB，SSIM: {report['render_ssim']:.3f}")
    failures = {k.split('.', 1)[1]: v for k, v in report.items()
                if k.startswith('stage_failures.') and v}
    if failures:
        print_warning(f"建圖階段失敗次數: {failures}")


def _run_to_dir(sequence_path: str, cfg, out_dir: Path) -> dict:
    """執行管線並寫出軌跡、地圖、相機與報告"""
    sequence = load_tum_sequence(Path(sequence_path), cfg.EVAL_MAX_TIME_DIFF)
    out_dir.mkdir(parents=True, exist_ok=True)
    pipeline, report = run_sequence(SequenceInput.from_tum(sequence), cfg, out_dir)

    data = report.to_dict()
    valid, errors = SchemaValidator().validate(data, 'run_report_schema')
    if not valid:
        raise SlamError('執行報告不符合 schema：' + '；'.join(errors))

    write_trajectory(pipeline.trajectory, out_dir / 'trajectory.txt')
    save_map(pipeline.gmap, out_dir / 'map.npz')
    write_camera(sequence.camera, out_dir / 'camera.txt')
    write_report(data, out_dir / 'report')
    return data


def cmd_simulate(args):
    """產生合成序列"""
    print_header(f"🎬 產生合成序列: {args.spec}")
    spec = load_scene_spec(args.spec)
    if args.seed is not None:
        spec = SceneSpec.from_dict({**spec.to_dict(), 'seed': args.seed})

    sequence = simulate_sequence(spec)
    out = write_sequence(sequence, Path(args.out))
    dynamic = spec.dynamic_gaussian_count
    total = spec.static_gaussian_count + dynamic
    print_success(f"已寫出 {len(sequence.frames)} 個影格至: {out}")
    print_info(f"Gaussian: {total}（動態 {dynamic}，{dynamic / max(total, 1):.1%}）")
    return EXIT_OK


def cmd_run(args):
    """執行管線"""
    print_header(f"🚀 執行管線: {args.sequence}")
    cfg = load_config(args.config, args.profile)
    data = _run_to_dir(args.sequence, cfg, Path(args.out))
    print_success(f"結果已寫入: {args.out}")
    _print_report(data)
    return EXIT_OK


def cmd_eval(args):
    """計算 ATE"""
    print_header("📏 評估軌跡")
    estimated = read_trajectory(Path(args.est))
    ground_truth = read_trajectory(Path(args.gt))
    result = evaluate_ate(estimated, ground_truth, args.max_dt)
    print_success(f"配對 {result.pair_count} 組位姿")
    print_info(f"ATE RMSE: {result.rmse:.6f} m")
    print_info(f"ATE STD:  {result.std:.6f} m")
    return EXIT_OK


def cmd_render(args):
    """以地圖渲染影像"""
    print_header(f"🖼️  渲染地圖: {args.map}")
    gmap = load_map(Path(args.map))
    camera_path = Path(args.camera) if args.camera else Path(args.map).parent / 'camera.txt'
    camera = read_camera(camera_path)
    trajectory = read_trajectory(Path(args.pose))
    if not len(trajectory):
        raise DataError('位姿檔是空的', args.pose)
    if not 0 <= args.index < len(trajectory):
        raise DataError(f'位姿索引超出範圍: {args.index}（共 {len(trajectory)} 筆）', args.pose)
    pose = trajectory[args.index]

    params = params_from_map(gmap, args.sh_degree)
    if args.mask:
        image = render_label_mask(params, pose, camera, DYNAMIC)
        print_info(f"動態 Gaussian: {int((params.labels == DYNAMIC).sum())}")
    else:
        image = composite(params, pose, camera).rgb
    write_image(Path(args.out), image)
    print_success(f"已儲存至: {args.out}")
    return EXIT_OK


def cmd_ablate(args):
    """消融實驗：完整管線 vs 關閉指定階段"""
    print_header(f"🧪 消融實驗: 關閉 {', '.join(args.disable)}")
    cfg = load_config(args.config, args.profile)
    ablated_cfg = cfg.disable(*args.disable)
    out = Path(args.out)

    print_info("執行完整管線...")
    full = _run_to_dir(args.sequence, cfg, out / 'full')
    print_info("執行消融管線...")
    ablated = _run_to_dir(args.sequence, ablated_cfg, out / 'ablated')

    print("\n" + "─" * 60)
    print(f"{'指標':<24}{'完整':>16}{'消融':>16}")
    for key in ('ate_rmse', 'ate_std', 'label_precision', 'label_recall',
                'false_dynamic_recovered', 'render_psnr'):
        print(f"{key:<24}{full[key]:>16.4f}{ablated[key]:>16.4f}")
    print("─" * 60)
    if ablated['ate_rmse'] > 0:
        print_info(f"ATE 比值（完整 / 消融）: {full['ate_rmse'] / ablated['ate_rmse']:.3f}")
    return EXIT_OK


def cmd_config(args):
    """寫出設定範本"""
    path = write_config_template(args.out)
    print_success(f"設定範本已寫入: {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description='動態場景 Gaussian SLAM CLI',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
範例:
  # 產生預設場景
  %(prog)s simulate default data/sim

  # 執行管線
  %(prog)s run data/sim --config slam.env --out output/run

  # 評估軌跡
  %(prog)s eval output/run/trajectory.txt data/sim/groundtruth.txt

  # 消融實驗
  %(prog)s ablate data/sim --disable crf flow penalty
        """
    )
    parser.add_argument('--verbose', '-v', action='store_true', help='顯示除錯訊息')
    subparsers = parser.add_subparsers(dest='command', help='可用指令')

    # simulate 指令
    simulate_parser = subparsers.add_parser('simulate', help='產生合成序列')
    simulate_parser.add_argument('spec', help="場景規格 JSON，或 'default'")
    simulate_parser.add_argument('out', help='輸出目錄')
    simulate_parser.add_argument('--seed', type=int, help='覆寫亂數種子')

    # run 指令
    run_parser = subparsers.add_parser('run', help='執行管線')
    run_parser.add_argument('sequence', help='TUM 格式序列目錄')
    run_parser.add_argument('--config', '-c', help='設定檔路徑')
    run_parser.add_argument('--profile', choices=list(PROFILES), help='內建設定 profile')
    run_parser.add_argument('--out', '-o', default='output/run', help='輸出目錄')

    # eval 指令
    eval_parser = subparsers.add_parser('eval', help='計算 ATE')
    eval_parser.add_argument('est', help='估計軌跡（TUM 格式）')
    eval_parser.add_argument('gt', help='真實軌跡（TUM 格式）')
    eval_parser.add_argument('--max-dt', type=float, default=0.02, help='時間戳記配對容許差（秒）')

    # render 指令
    render_parser = subparsers.add_parser('render', help='以地圖渲染影像')
    render_parser.add_argument('map', help='地圖檔（.npz）')
    render_parser.add_argument('pose', help='位姿檔（TUM 格式）')
    render_parser.add_argument('out', help='輸出影像（.png / .ppm）')
    render_parser.add_argument('--index', type=int, default=0, help='使用第幾筆位姿')
    render_parser.add_argument('--camera', help='相機檔（預設為地圖目錄的 camera.txt）')
    render_parser.add_argument('--mask', action='store_true', help='輸出動態遮罩')
    render_parser.add_argument('--sh-degree', type=int, default=0, choices=[0, 1], help='SH 階數')

    # ablate 指令
    ablate_parser = subparsers.add_parser('ablate', help='消融實驗')
    ablate_parser.add_argument('sequence', help='TUM 格式序列目錄')
    ablate_parser.add_argument('--disable', nargs='+', required=True,
                               choices=['crf', 'flow', 'penalty', 'mapping'], help='關閉的階段')
    ablate_parser.add_argument('--config', '-c', help='設定檔路徑')
    ablate_parser.add_argument('--profile', choices=list(PROFILES), help='內建設定 profile')
    ablate_parser.add_argument('--out', '-o', default='output/ablate', help='輸出目錄')

    # config 指令
    config_parser = subparsers.add_parser('config', help='寫出設定範本')
    config_parser.add_argument('out', help='輸出路徑')

    return parser


def main(argv=None):
    """主程式"""
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return EXIT_CONFIG

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )

    # 執行對應指令
    commands = {
        'simulate': cmd_simulate,
        'run': cmd_run,
        'eval': cmd_eval,
        'render': cmd_render,
        'ablate': cmd_ablate,
        'config': cmd_config,
    }

    try:
        return commands[args.command](args)
    except ConfigError as e:
        print_error(f"設定錯誤: {e}")
        return EXIT_CONFIG
    except (DataError, InsufficientDataError) as e:
        print_error(f"資料錯誤: {e}")
        return EXIT_DATA
    except SlamError as e:
        print_error(f"執行失敗: {e}")
        return EXIT_RUNTIME
    except OSError as e:
        print_error(f"I/O 錯誤: {e}")
        return EXIT_DATA
    except Exception as e:
        print_error(f"執行失敗: {e}")
        return EXIT_RUNTIME


if __name__ == '__main__':
    sys.exit(main())
