class AVSegError(Exception):
    code = 'avseg_error'

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_json(self) -> dict:
        return {'code': self.code, 'message': self.message, **self.details}


class ConfigError(AVSegError):
    code = 'config_error'


class ShapeError(AVSegError):
    code = 'shape_error'


class AudioError(AVSegError):
    code = 'audio_error'


class DataError(AVSegError):
    code = 'data_error'


class CheckpointError(AVSegError):
    code = 'checkpoint_error'


class TrainingError(AVSegError):
    """Raised when a training step produces a non-finite loss."""

    code = 'training_error'

    def __init__(self, message: str, batch_ids: list[str], **details):
        super().__init__(message, batch_ids=batch_ids, **details)
        self.batch_ids = batch_ids
