import numpy as np
from scipy import stats
from sklearn.metrics import (accuracy_score, classification_report, confusion_matrix, f1_score,
                             matthews_corrcoef)

from writer import output_to_file


class Evaluation:
    """
    Evaluate the predictions on the held-out data.
    """

    def __init__(self, labels, predictions, task='single', name='finetune'):
        self.labels = np.asarray(labels)
        self.predictions = np.asarray(predictions)
        self.task = task
        self.name = name
        self.eval_res = ''

    @property
    def is_regression(self):
        return self.task == 'regression'

    def evaluate(self, directory=None, extra=None):
        """
        Compute the metric dictionary; with a directory, also write the
        text report next to the other run outputs.
        """
        if self.is_regression:
            metrics = self.compute_correlations(self.labels, self.predictions)
        else:
            metrics = self.compute_metrics(self.labels, self.predictions)
        metrics.update(extra or {})

        self.eval_res = ''.join(f'{key}\t{value:.6g}\n' for key, value in sorted(metrics.items())) + '\n'
        if not self.is_regression:
            self.eval_res += str(self.compute_confusion_matrix(self.labels, self.predictions)) + '\n\n'
            self.eval_res += str(self.get_classification_report(self.labels, self.predictions)) + '\n'

        if directory is not None:
            output_to_file(filename=self.name + '_eval.txt', text=self.eval_res, directory=directory)
        return metrics

    def compute_metrics(self, labels, preds):
        return {
            'accuracy': accuracy_score(labels, preds),
            'f1': f1_score(labels, preds, average='weighted', zero_division=0),
            'mcc': matthews_corrcoef(labels, preds),
        }

    def compute_correlations(self, labels, preds):
        return {
            'pearson': float(stats.pearsonr(labels, preds)[0]),
            'spearman': float(stats.spearmanr(labels, preds)[0]),
        }

    def compute_confusion_matrix(self, labels, preds):
        return confusion_matrix(labels, preds)

    def get_classification_report(self, labels, preds):
        return classification_report(labels, preds, zero_division=0)
