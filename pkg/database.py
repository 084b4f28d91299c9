import json
import logging
import sqlite3
from typing import Dict, List, Optional

logger = logging.getLogger(__name__)


class RunDatabase:
    """sqlite registry of command runs and the files they read and wrote."""

    def __init__(self, db_path: str = "runs.db"):
        self.db_path = db_path
        self.init_database()

    def init_database(self):
        """Initialize the database with required tables"""
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()

        cursor.execute('''
            CREATE TABLE IF NOT EXISTS runs (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                command TEXT NOT NULL,
                config TEXT NOT NULL,
                seed INTEGER,
                wall_time REAL NOT NULL,
                version TEXT NOT NULL,
                exit_code INTEGER NOT NULL DEFAULT 0,
                summary TEXT,
                created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
            )
        ''')

        cursor.execute('''
            CREATE TABLE IF NOT EXISTS run_files (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id INTEGER NOT NULL,
                role TEXT NOT NULL,
                path TEXT NOT NULL,
                sha256 TEXT,
                FOREIGN KEY (run_id) REFERENCES runs (id) ON DELETE CASCADE
            )
        ''')

        cursor.execute('CREATE INDEX IF NOT EXISTS idx_runs_date ON runs(created_at)')
        cursor.execute('CREATE INDEX IF NOT EXISTS idx_runs_command ON runs(command)')
        cursor.execute('CREATE INDEX IF NOT EXISTS idx_files_run ON run_files(run_id)')
        cursor.execute('CREATE INDEX IF NOT EXISTS idx_files_hash ON run_files(sha256)')

        conn.commit()
        conn.close()

    def save_run(self, manifest: Dict) -> int:
        """Store a run manifest and its input/output files"""
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()

        try:
            cursor.execute('''
                INSERT INTO runs (command, config, seed, wall_time, version, exit_code, summary)
                VALUES (?, ?, ?, ?, ?, ?, ?)
            ''', (
                manifest['command'],
                json.dumps(manifest.get('config', {}), sort_keys=True),
                manifest.get('seed'),
                manifest['wall_time'],
                manifest['version'],
                manifest.get('exit_code', 0),
                manifest.get('summary'),
            ))
            run_id = cursor.lastrowid

            for entry in manifest.get('inputs', []):
                cursor.execute('''
                    INSERT INTO run_files (run_id, role, path, sha256) VALUES (?, 'input', ?, ?)
                ''', (run_id, entry['path'], entry.get('sha256')))
            for path in manifest.get('outputs', []):
                cursor.execute('''
                    INSERT INTO run_files (run_id, role, path, sha256) VALUES (?, 'output', ?, NULL)
                ''', (run_id, path))

            conn.commit()
            logger.info("registered %s run %d in %s", manifest['command'], run_id, self.db_path)
            return run_id

        except Exception:
            conn.rollback()
            raise
        finally:
            conn.close()

    def _run_with_files(self, cursor, row, columns) -> Dict:
        run = dict(zip(columns, row))
        run['config'] = json.loads(run['config'])
        cursor.execute('''
            SELECT role, path, sha256 FROM run_files WHERE run_id = ? ORDER BY id
        ''', (run['id'],))
        file_columns = [description[0] for description in cursor.description]
        run['files'] = [dict(zip(file_columns, r)) for r in cursor.fetchall()]
        return run

    def get_run(self, run_id: int) -> Optional[Dict]:
        """Get a run by id, with its files"""
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()

        try:
            cursor.execute('SELECT * FROM runs WHERE id = ?', (run_id,))
            row = cursor.fetchone()
            if not row:
                return None
            columns = [description[0] for description in cursor.description]
            return self._run_with_files(cursor, row, columns)
        finally:
            conn.close()

    def get_recent_runs(self, limit: int = 20, command: Optional[str] = None) -> List[Dict]:
        """Get the most recent runs, optionally for one command"""
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()

        try:
            if command:
                cursor.execute('''
                    SELECT * FROM runs WHERE command = ? ORDER BY id DESC LIMIT ?
                ''', (command, limit))
            else:
                cursor.execute('SELECT * FROM runs ORDER BY id DESC LIMIT ?', (limit,))
            columns = [description[0] for description in cursor.description]
            rows = cursor.fetchall()
            return [self._run_with_files(cursor, row, columns) for row in rows]
        finally:
            conn.close()

    def find_runs_by_input(self, sha256: str) -> List[int]:
        """Ids of runs that read a file with the given hash"""
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()

        try:
            cursor.execute('''
                SELECT DISTINCT run_id FROM run_files
                WHERE role = 'input' AND sha256 = ?
                ORDER BY run_id
            ''', (sha256,))
            return [row[0] for row in cursor.fetchall()]
        finally:
            conn.close()

    def get_statistics(self) -> Dict:
        """Run counts per command and total wall time"""
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()

        try:
            cursor.execute('SELECT COUNT(*), COALESCE(SUM(wall_time), 0) FROM runs')
            total_runs, total_time = cursor.fetchone()
            cursor.execute('''
                SELECT command, COUNT(*) FROM runs GROUP BY command ORDER BY command
            ''')
            per_command = dict(cursor.fetchall())
            cursor.execute('SELECT COUNT(*) FROM runs WHERE exit_code != 0')
            failed = cursor.fetchone()[0]
            return {
                'total_runs': total_runs,
                'failed_runs': failed,
                'total_wall_time': total_time,
                'runs_by_command': per_command,
            }
        finally:
            conn.close()
