"""
例外類別

整個管線共用的錯誤階層，cli.py 依類別對應結束代碼：
1. ConfigError → 1（設定錯誤）
2. DataError / InsufficientDataError → 2（資料錯誤）
3. 其他 SlamError → 3（執行期失敗）
"""


class SlamError(Exception):
    """管線錯誤基底類別"""


class ConfigError(SlamError):
    """設定檔或參數錯誤"""


class DataError(SlamError):
    """資料讀寫或解析錯誤"""

    def __init__(self, message: str, path: str = None, line: int = None):
        self.path = path
        self.line = line
        location = ''
        if path is not None:
            location = f'{path}:{line}: ' if line is not None else f'{path}: '
        super().__init__(f'{location}{message}')


class InsufficientDataError(SlamError):
    """樣本或資料量不足（自舉影格、統計樣本、對應點等）"""


class DimensionError(SlamError, ValueError):
    """影像或陣列尺寸不一致"""


class GeometryError(SlamError):
    """幾何運算錯誤"""


class CheiralityError(GeometryError):
    """點位於相機後方"""


class UnknownGaussianError(SlamError, KeyError):
    """地圖中找不到指定的 Gaussian"""

    def __str__(self):
        return f'找不到 Gaussian: {self.args[0]}'
