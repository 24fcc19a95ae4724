"""
JSON Schema 驗證工具

用於驗證場景規格（simulate 輸入）與執行報告（run 輸出）是否符合 schemas/ 中的定義
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from jsonschema import Draft7Validator

logger = logging.getLogger(__name__)

SCHEMAS_DIR = Path(__file__).resolve().parent.parent / 'schemas'


class SchemaValidator:
    """JSON Schema 驗證器"""

    def __init__(self, schemas_dir: Optional[str] = None):
        """
        初始化驗證器

        Args:
            schemas_dir: Schema 檔案目錄（預設為專案的 schemas/）
        """
        self.schemas_dir = Path(schemas_dir) if schemas_dir is not None else SCHEMAS_DIR
        self.schemas_cache: Dict[str, Dict] = {}

    def load_schema(self, schema_name: str) -> Dict:
        """
        載入 Schema

        Args:
            schema_name: Schema 名稱（不含 .json 副檔名）

        Returns:
            Schema 字典
        """
        if schema_name in self.schemas_cache:
            return self.schemas_cache[schema_name]

        schema_path = self.schemas_dir / f'{schema_name}.json'
        if not schema_path.exists():
            raise FileNotFoundError(f'找不到 Schema 檔案: {schema_path}')

        with open(schema_path, 'r', encoding='utf-8') as f:
            schema = json.load(f)

        self.schemas_cache[schema_name] = schema
        return schema

    def validate(self, data: Dict, schema_name: str) -> Tuple[bool, Optional[List[str]]]:
        """
        驗證資料並收集所有錯誤

        Args:
            data: 要驗證的資料
            schema_name: Schema 名稱

        Returns:
            (是否通過驗證, 錯誤訊息列表)
        """
        try:
            schema = self.load_schema(schema_name)
        except FileNotFoundError as e:
            return False, [str(e)]

        errors = sorted(Draft7Validator(schema).iter_errors(data), key=lambda e: list(e.path))
        if not errors:
            return True, None

        messages = []
        for e in errors:
            location = ' -> '.join(str(p) for p in e.path)
            messages.append(f'{location}: {e.message}' if location else e.message)
        logger.debug('%s 驗證失敗：%d 個錯誤', schema_name, len(messages))
        return False, messages

    def apply_defaults(self, data: Dict, schema_name: str) -> Dict[str, Any]:
        """補上 schema 中有 default 的頂層欄位（不修改輸入）"""
        schema = self.load_schema(schema_name)
        filled = dict(data)
        for key, prop in schema.get('properties', {}).items():
            if key not in filled and 'default' in prop:
                filled[key] = prop['default']
        return filled

    def list_schemas(self) -> List[str]:
        """列出所有可用的 Schema"""
        if not self.schemas_dir.exists():
            return []
        return sorted(f.stem for f in self.schemas_dir.glob('*.json') if f.is_file())


__all__ = [
    'SchemaValidator',
]
