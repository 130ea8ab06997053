import datetime

from peewee import CharField, DateTimeField, Model, SqliteDatabase, TextField, chunked

SQLITE_VAR_LIMIT = 999
STATUS_PENDING = 'pending'
STATUS_PASSED = 'passed'
STATUS_FAILED = 'failed'
STATUS_ERROR = 'error'
FINISHED = (STATUS_PASSED, STATUS_FAILED)

db = SqliteDatabase(None)


def initialize_db(db_file_path):
    db.init(db_file_path, timeout=60, pragmas={'journal_mode': 'wal'})
    db.create_tables([Run], safe=True)
    return db


def _now():
    return datetime.datetime.now(datetime.timezone.utc)


class Run(Model):
    """
    One sweep point, keyed by its config digest. status moves from pending to passed, failed or error; only passed
    and failed points count as done when a sweep is repeated in skip mode.
    """
    digest = CharField(primary_key=True)
    mode = CharField()
    output_dir = CharField()
    status = CharField(default=STATUS_PENDING, index=True)
    message = TextField(null=True)
    updated = DateTimeField(default=_now)

    class Meta:
        database = db

    @staticmethod
    def statuses(digests):
        """
        :param digests: Iterable of config digests
        :return: Dictionary {digest: status} for the digests that have a record
        """
        found = {}
        for key_batch in chunked(list(digests), SQLITE_VAR_LIMIT):
            query = Run.select(Run.digest, Run.status).where(Run.digest.in_(list(key_batch)))
            found.update(dict(query.tuples().iterator()))
        return found

    @staticmethod
    def output_dir_for(digest):
        """
        :return: The directory a point was written to, or None when the digest is unknown
        """
        record = Run.get_or_none(Run.digest == digest)
        return None if record is None else record.output_dir

    @classmethod
    def db_skip(cls, points):
        """
        Registers the points that have not finished before. Points left pending or in error by an earlier sweep are
        run again.
        :param points: Dictionary of the form {digest: (mode, output_dir)}
        :return: List of digests to execute
        """
        done = {digest for digest, status in cls.statuses(points).items() if status in FINISHED}
        selected = [digest for digest in points if digest not in done]
        cls._register({digest: points[digest] for digest in selected})
        return selected

    @classmethod
    def db_replace(cls, points):
        """
        Registers every point, resetting earlier records to pending.
        """
        cls._register(points)
        return list(points)

    @classmethod
    def db_error(cls, points):
        """
        Registers every point, raising ValueError if any of them is already indexed.
        """
        known = cls.statuses(points)
        if known:
            raise ValueError(f'{len(known)} sweep points are already indexed.')
        cls._register(points)
        return list(points)

    @staticmethod
    def mark(digest, status, message=None):
        """
        :return: The number of updated records, 0 for an unknown digest
        """
        return Run.update(status=status, message=message, updated=_now()).where(Run.digest == digest).execute()

    @staticmethod
    def _register(points):
        rows = [{'digest': digest, 'mode': mode, 'output_dir': output_dir, 'status': STATUS_PENDING,
                 'message': None, 'updated': _now()}
                for digest, (mode, output_dir) in points.items()]
        with db.atomic():
            for batch in chunked(rows, SQLITE_VAR_LIMIT // 6):
                Run.replace_many(batch).execute()
        return len(rows)
