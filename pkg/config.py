"""
配置檔案

設定檔為扁平的 KEY=value 文字（python-dotenv 格式），以 `# [section]` 註解分段，
每個鍵都帶有段落前綴（CRF_ITERATIONS、FLOW_CHI2_THRESHOLD ...）。

優先序：內建 profile 預設值 < 設定檔 < 環境變數
"""
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

from dotenv import dotenv_values, load_dotenv

from utils.errors import ConfigError

load_dotenv()


@dataclass(frozen=True)
class SlamConfig:
    """完整管線設定（欄位名稱即設定鍵）"""

    # [map]
    MAP_WINDOW_SIZE: int = 10
    MAP_INITIAL_OPACITY: float = 0.5

    # [stats]
    STATS_MIN_OBSERVATIONS: int = 2
    STATS_MIN_SAMPLES: int = 8
    STATS_VARIANCE_FLOOR: float = 1e-6
    STATS_UNARY_EPSILON: float = 1e-6
    STATS_WEIGHTS: Tuple[float, ...] = (0.25, 0.25, 0.25, 0.25)
    STATS_REFIT_INTERVAL: int = 5
    STATS_OUTLIER_GATE_PX: float = 0.0

    # [bootstrap]
    BOOTSTRAP_FRAMES: int = 10

    # [crf]
    CRF_ENABLED: bool = True
    CRF_ITERATIONS: int = 5
    CRF_KERNEL_WEIGHTS: Tuple[float, ...] = (1.0, 1.0)
    CRF_BANDWIDTHS: Tuple[float, ...] = ()
    CRF_PAIRWISE_NORMALIZATION: str = 'node_count'
    CRF_DELETE_THRESHOLD: float = 0.9

    # [flow]
    FLOW_ENABLED: bool = True
    FLOW_WINDOW: int = 15
    FLOW_LEVELS: int = 3
    FLOW_MAX_ITERATIONS: int = 30
    FLOW_EPSILON: float = 0.01
    FLOW_CHI2_THRESHOLD: float = 5.991
    FLOW_COVARIANCE_FLOOR: float = 1e-4
    FLOW_MAX_STATIC_POINTS: int = 200

    # [pose]
    POSE_INITIAL_DAMPING: float = 1e-4
    POSE_DAMPING_FACTOR: float = 10.0
    POSE_MAX_ITERATIONS: int = 20
    POSE_UPDATE_TOLERANCE: float = 1e-8
    POSE_COST_TOLERANCE: float = 1e-10
    POSE_ROBUST: bool = True
    POSE_HUBER_DELTA: float = 1.345
    POSE_PIXEL_SIGMA: float = 1.0
    POSE_OUTLIER_ROUNDS: int = 4
    POSE_REFINE_AFTER_RECOVERY: bool = True

    # [render]
    RENDER_SH_DEGREE: int = 0
    RENDER_PYRAMID_LEVELS: int = 3

    # [loss]
    LOSS_PHOTOMETRIC_WEIGHT: float = 0.8
    LOSS_DYNAMIC_WEIGHT: float = 0.2
    LOSS_SSIM_LAMBDA: float = 0.2
    PENALTY_ENABLED: bool = True

    # [mapping]
    MAPPING_ENABLED: bool = True
    MAPPING_ITERATIONS: Tuple[int, ...] = (30, 30, 40)
    MAPPING_OPTIMIZER: str = 'sgd'
    MAPPING_LR_COLOR: float = 0.0025
    MAPPING_LR_OPACITY: float = 0.05
    MAPPING_LR_POSITION: float = 1.6e-4
    MAPPING_LR_SCALE: float = 0.005
    MAPPING_LR_ROTATION: float = 0.001
    MAPPING_LR_POSITION_DECAY: float = 0.01
    MAPPING_KEYFRAME_STRIDE: int = 1
    MAPPING_WINDOW_KEYFRAMES: int = 3

    # [prune]
    PRUNE_MIN_OPACITY: float = 0.005
    PRUNE_MAX_SCALE_RATIO: float = 0.5

    # [eval]
    EVAL_MAX_TIME_DIFF: float = 0.02

    # [run]
    RUN_CONCURRENT: bool = True

    # [output]
    OUTPUT_LABEL_DUMPS: bool = False
    OUTPUT_LOSS_TRACES: bool = False

    def __post_init__(self):
        checks = [
            (self.MAP_WINDOW_SIZE >= 1, 'MAP_WINDOW_SIZE', '必須 ≥ 1'),
            (0.0 <= self.MAP_INITIAL_OPACITY <= 1.0, 'MAP_INITIAL_OPACITY', '必須在 [0, 1]'),
            (len(self.STATS_WEIGHTS) == 4, 'STATS_WEIGHTS', '需要 4 個權重'),
            (self.BOOTSTRAP_FRAMES >= 1, 'BOOTSTRAP_FRAMES', '必須 ≥ 1'),
            (self.CRF_ITERATIONS >= 1, 'CRF_ITERATIONS', '必須 ≥ 1'),
            (len(self.CRF_KERNEL_WEIGHTS) == 2, 'CRF_KERNEL_WEIGHTS', '需要 2 個權重'),
            (len(self.CRF_BANDWIDTHS) in (0, 4) and all(b > 0 for b in self.CRF_BANDWIDTHS),
             'CRF_BANDWIDTHS', '留空（依資料）或 4 個正數'),
            (self.CRF_PAIRWISE_NORMALIZATION in ('node_count', 'none'),
             'CRF_PAIRWISE_NORMALIZATION', '必須是 node_count 或 none'),
            (0.0 <= self.CRF_DELETE_THRESHOLD <= 1.0, 'CRF_DELETE_THRESHOLD', '必須在 [0, 1]'),
            (self.FLOW_WINDOW >= 3, 'FLOW_WINDOW', '必須 ≥ 3'),
            (self.FLOW_LEVELS >= 1, 'FLOW_LEVELS', '必須 ≥ 1'),
            (self.POSE_HUBER_DELTA > 0, 'POSE_HUBER_DELTA', '必須為正'),
            (self.POSE_PIXEL_SIGMA > 0, 'POSE_PIXEL_SIGMA', '必須為正'),
            (self.POSE_OUTLIER_ROUNDS >= 1, 'POSE_OUTLIER_ROUNDS', '必須 ≥ 1'),
            (self.RENDER_SH_DEGREE in (0, 1), 'RENDER_SH_DEGREE', '只支援 0 或 1'),
            (self.RENDER_PYRAMID_LEVELS >= 1, 'RENDER_PYRAMID_LEVELS', '必須 ≥ 1'),
            (0.0 <= self.LOSS_SSIM_LAMBDA <= 1.0, 'LOSS_SSIM_LAMBDA', '必須在 [0, 1]'),
            (len(self.MAPPING_ITERATIONS) == self.RENDER_PYRAMID_LEVELS,
             'MAPPING_ITERATIONS', '數量必須等於 RENDER_PYRAMID_LEVELS'),
            (self.MAPPING_OPTIMIZER in ('adam', 'sgd'), 'MAPPING_OPTIMIZER', '必須是 adam 或 sgd'),
            (0.0 < self.MAPPING_LR_POSITION_DECAY <= 1.0, 'MAPPING_LR_POSITION_DECAY', '必須在 (0, 1]'),
            (self.MAPPING_KEYFRAME_STRIDE >= 1, 'MAPPING_KEYFRAME_STRIDE', '必須 ≥ 1'),
            (self.MAPPING_WINDOW_KEYFRAMES >= 1, 'MAPPING_WINDOW_KEYFRAMES', '必須 ≥ 1'),
        ]
        for ok, key, message in checks:
            if not ok:
                raise ConfigError(f'{key} {message}（目前為 {getattr(self, key)!r}）')

    def to_dict(self) -> Dict[str, object]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def disable(self, *stages: str) -> 'SlamConfig':
        """
        關閉指定階段（消融實驗）

        Args:
            stages: crf / flow / penalty / mapping
        """
        switches = {'crf': 'CRF_ENABLED', 'flow': 'FLOW_ENABLED',
                    'penalty': 'PENALTY_ENABLED', 'mapping': 'MAPPING_ENABLED'}
        changes = {}
        for stage in stages:
            if stage not in switches:
                raise ConfigError(f'未知的階段: {stage}（可用: {", ".join(switches)}）')
            changes[switches[stage]] = False
        return replace(self, **changes)


# 內建 profile；quick 只覆寫迭代預算，adam 改用 Adam 最佳化器
PROFILES: Dict[str, Dict[str, object]] = {
    'default': {},
    'quick': {
        'MAPPING_ITERATIONS': (3, 3, 4),
        'MAPPING_WINDOW_KEYFRAMES': 1,
        'POSE_MAX_ITERATIONS': 10,
    },
    'adam': {
        'MAPPING_OPTIMIZER': 'adam',
    },
}

_SECTIONS = {
    'MAP': 'map', 'STATS': 'stats', 'BOOTSTRAP': 'bootstrap', 'CRF': 'crf', 'FLOW': 'flow',
    'POSE': 'pose', 'RENDER': 'render', 'LOSS': 'loss', 'PENALTY': 'loss',
    'MAPPING': 'mapping', 'PRUNE': 'prune', 'EVAL': 'eval', 'RUN': 'run', 'OUTPUT': 'output',
}

_TRUE = {'1', 'true', 'yes', 'on'}
_FALSE = {'0', 'false', 'no', 'off'}


def _parse_value(key: str, raw: str, default: object) -> object:
    """依預設值的型別解析字串"""
    text = str(raw).strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            if not text:
                return ()
            kind = type(default[0]) if default else float
            return tuple(kind(part.strip()) for part in text.split(','))
        return text
    except ValueError:
        raise ConfigError(f'設定 {key} 的值無法解析: {raw!r}') from None


def _format_value(value: object) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, tuple):
        return ','.join(str(v) for v in value)
    return str(value)


def load_config(path: Optional[str] = None, profile: Optional[str] = None,
                environ: Optional[Mapping[str, str]] = None) -> SlamConfig:
    """
    載入設定

    Args:
        path: 設定檔路徑（None 表示只用預設值與環境變數）
        profile: default / quick / adam（None 時讀 SLAM_PROFILE）
        environ: 環境變數來源（預設 os.environ）

    Returns:
        SlamConfig

    Raises:
        ConfigError: 未知的 profile 或鍵、無法解析的值、檔案不存在
    """
    environ = os.environ if environ is None else environ
    profile = profile or environ.get('SLAM_PROFILE', 'default')
    if profile not in PROFILES:
        raise ConfigError(f'未知的 profile: {profile}（可用: {", ".join(PROFILES)}）')

    defaults = SlamConfig().to_dict()
    values = dict(defaults)
    values.update(PROFILES[profile])

    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f'找不到設定檔: {path}')
        file_values = dotenv_values(path)
        unknown = sorted(set(file_values) - set(defaults))
        if unknown:
            raise ConfigError(f'未知的設定鍵: {", ".join(unknown)}')
        for key, raw in file_values.items():
            if raw is None:
                raise ConfigError(f'設定 {key} 沒有值')
            values[key] = _parse_value(key, raw, defaults[key])

    for key in defaults:
        if key in environ:
            values[key] = _parse_value(key, environ[key], defaults[key])

    return SlamConfig(**values)


def get_config(profile: Optional[str] = None) -> SlamConfig:
    """取得配置（不讀設定檔）"""
    return load_config(None, profile)


def write_config_template(path: str, cfg: Optional[SlamConfig] = None) -> Path:
    """寫出含所有鍵的設定範本"""
    cfg = cfg or SlamConfig()
    lines = ['# 動態場景 Gaussian SLAM 設定檔', '# 優先序：預設值 < 本檔 < 環境變數', '']
    current = None
    for key, value in cfg.to_dict().items():
        section = _SECTIONS[key.split('_')[0]]
        if section != current:
            if current is not None:
                lines.append('')
            lines.append(f'# [{section}]')
            current = section
        lines.append(f'{key}={_format_value(value)}')
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text('\n'.join(lines) + '\n', encoding='utf-8')
    return out
