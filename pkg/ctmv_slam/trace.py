#
# Copyright 2026 The ctmv-slam authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#    http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
#
import threading

from .utils import numpy_to_json


class RunLog:
    """Newline delimited event log of a run: one {t, stage, event, payload} per line"""

    def __init__(self, filename=None):
        self.filename = filename
        self.events = []
        self._lock = threading.Lock()
        self.file = None if filename is None else open(filename, "w")

    def event(self, t, stage, event, **payload):
        record = {"t": t, "stage": stage, "event": event, "payload": payload}
        with self._lock:
            self.events.append(record)
            if self.file is not None:
                self.file.write(numpy_to_json(record) + "\n")

    def select(self, stage=None, event=None):
        return [
            e
            for e in self.events
            if (stage is None or e["stage"] == stage)
            and (event is None or e["event"] == event)
        ]

    def close(self):
        if self.file is not None:
            self.file.close()
            self.file = None

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_value, exc_traceback):
        self.close()
