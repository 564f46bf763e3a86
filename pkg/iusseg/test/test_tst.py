import os
import pickle

from iusseg.test import tst


def test_baseline_reproduces(tmp_path):
    directory = str(tmp_path)
    path = tst.do_baseline_test(directory)
    assert os.path.isfile(path)
    assert tst.test(directory, threads=2) == 0
    with open(os.path.join(directory, tst.REPORT_FILE)) as fr:
        assert fr.read() == ''


def test_changed_case_is_reported(tmp_path):
    directory = str(tmp_path)
    path = tst.do_baseline_test(directory)
    with open(path, 'rb') as fr:
        cases = pickle.load(fr)
    frame = cases[0].sweep.frames[0]
    frame.pixels = frame.pixels * 0.5 + 0.25
    del cases[1]
    with open(path, 'wb') as fw:
        pickle.dump(cases, fw)
    assert tst.test(directory) == 2
    with open(os.path.join(directory, tst.REPORT_FILE)) as fr:
        report = fr.read()
    assert "Case 'two_layer_linear', frame 0 differs" in report
    assert "Case 'sphere_curvilinear' is not in the baseline." in report
